//! Conflict-aware meta-verification.
//!
//! Four stages over the experts' traces: gate-based pruning, consensus
//! anchoring, budgeted auditing of contested steps, and scored synthesis of
//! the final answer. Every decision is appended to an [`AuditLog`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit_log::{payload, AuditLog, Stage};
use crate::ensemble::{collect, AllExpertsFailedError, ExpertBackend, ExpertConfig, ExpertId, ExpertOutput};
use crate::facts::FactsStore;
use crate::plan_dag::{PlanDag, StepId};
use crate::tools::ToolRunner;
use crate::value::{group_values, CanonicalValue};
use crate::verifier::{
    excise, gate, verify, ConstraintSet, ContestedStatement, OperatorRegistry, VerdictValue,
    VerifyContext, DEFAULT_GATE_THRESHOLD,
};

pub const DEFAULT_THETA: usize = 2;
/// Cap on the default audit budget when none is configured.
pub const DEFAULT_BUDGET_CAP: usize = 16;

// ── Traces and statements ────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceRef {
    pub expert_id: ExpertId,
    pub index: usize,
}

impl fmt::Display for TraceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.expert_id, self.index)
    }
}

/// A gate-filtered trace that survived Stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedTrace {
    pub trace: TraceRef,
    pub output: ExpertOutput,
    pub gate_score: f64,
}

impl RetainedTrace {
    pub fn new(output: ExpertOutput, index: usize, gate_score: f64) -> Self {
        RetainedTrace {
            trace: TraceRef {
                expert_id: output.expert_id.clone(),
                index,
            },
            output,
            gate_score,
        }
    }

    fn asserts(&self, step: &StepId, value: &CanonicalValue) -> bool {
        self.output
            .intermediates
            .get(step)
            .is_some_and(|r| r.value.canonical_eq(value))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub step: StepId,
    pub value: CanonicalValue,
    pub expert_id: ExpertId,
    pub confidence: f64,
}

/// One entry per surviving intermediate, in trace then step order.
pub fn statements(traces: &[RetainedTrace]) -> Vec<Statement> {
    traces
        .iter()
        .flat_map(|t| {
            t.output.intermediates.iter().map(move |(step, r)| Statement {
                step: step.clone(),
                value: r.value.clone(),
                expert_id: t.output.expert_id.clone(),
                confidence: r.confidence,
            })
        })
        .collect()
}

/// Distinct values asserted at each step, with their distinct supporters.
fn step_groups(stmts: &[Statement]) -> BTreeMap<StepId, Vec<(CanonicalValue, BTreeSet<ExpertId>)>> {
    let mut by_step: BTreeMap<&StepId, Vec<&Statement>> = BTreeMap::new();
    for s in stmts {
        by_step.entry(&s.step).or_default().push(s);
    }
    by_step
        .into_iter()
        .map(|(step, at)| {
            let groups = group_values(at.iter().map(|s| &s.value))
                .into_iter()
                .map(|(v, members)| {
                    let experts = members.iter().map(|&i| at[i].expert_id.clone()).collect();
                    (v, experts)
                })
                .collect();
            (step.clone(), groups)
        })
        .collect()
}

// ── Anchors ──────────────────────────────────────────────────

/// Consensus premises: at most one value per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    theta: usize,
    anchors: BTreeMap<StepId, CanonicalValue>,
}

impl AnchorSet {
    pub fn new(theta: usize) -> Self {
        AnchorSet {
            theta,
            anchors: BTreeMap::new(),
        }
    }

    pub fn theta(&self) -> usize {
        self.theta
    }

    pub fn get(&self, step: &StepId) -> Option<&CanonicalValue> {
        self.anchors.get(step)
    }

    pub fn contains_step(&self, step: &StepId) -> bool {
        self.anchors.contains_key(step)
    }

    pub fn insert(&mut self, step: StepId, value: CanonicalValue) {
        self.anchors.insert(step, value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StepId, &CanonicalValue)> {
        self.anchors.iter()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchoring {
    pub anchors: AnchorSet,
    /// Steps where two values reached theta with equal support.
    pub ties: Vec<StepId>,
    /// Support count of each anchored value.
    pub support: BTreeMap<StepId, usize>,
}

/// Promotes `(s, v)` when at least `theta` distinct experts assert `v` at `s`.
///
/// If several values at one step qualify, the best-supported wins; an exact
/// tie anchors nothing and leaves the step contested.
pub fn anchor(stmts: &[Statement], theta: usize) -> Result<Anchoring, CamvError> {
    if theta < 2 {
        return Err(CamvError::InvalidTheta(theta));
    }
    let mut anchors = AnchorSet::new(theta);
    let mut ties = Vec::new();
    let mut support = BTreeMap::new();
    for (step, groups) in step_groups(stmts) {
        let mut qualified: Vec<(&CanonicalValue, usize)> = groups
            .iter()
            .map(|(v, e)| (v, e.len()))
            .filter(|(_, n)| *n >= theta)
            .collect();
        qualified.sort_by_key(|q| std::cmp::Reverse(q.1));
        match qualified.as_slice() {
            [] => {}
            [(v, n)] => {
                anchors.insert(step.clone(), (*v).clone());
                support.insert(step, *n);
            }
            [(v, n), (_, m), ..] if n > m => {
                anchors.insert(step.clone(), (*v).clone());
                support.insert(step, *n);
            }
            _ => ties.push(step),
        }
    }
    Ok(Anchoring {
        anchors,
        ties,
        support,
    })
}

// ── Conflicts ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictState {
    Open,
    Supported,
    Refuted,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: CanonicalValue,
    pub supporters: Vec<ExpertId>,
    pub verdict: Option<VerdictValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictItem {
    /// Ordered by supporter count (descending), then first appearance.
    pub candidates: Vec<Candidate>,
    pub state: ConflictState,
}

impl ConflictItem {
    pub fn supported_value(&self) -> Option<&CanonicalValue> {
        self.candidates
            .iter()
            .find(|c| c.verdict == Some(VerdictValue::Support))
            .map(|c| &c.value)
    }

    pub fn refuted_values(&self) -> impl Iterator<Item = &CanonicalValue> {
        self.candidates
            .iter()
            .filter(|c| c.verdict == Some(VerdictValue::Refute))
            .map(|c| &c.value)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConflictSet {
    items: BTreeMap<StepId, ConflictItem>,
}

impl ConflictSet {
    pub fn get(&self, step: &StepId) -> Option<&ConflictItem> {
        self.items.get(step)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StepId, &ConflictItem)> {
        self.items.iter()
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepId> {
        self.items.keys()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count_state(&self, state: ConflictState) -> usize {
        self.items.values().filter(|i| i.state == state).count()
    }

    /// All `(step, value)` pairs that received a refute verdict.
    pub fn refuted_statements(&self) -> Vec<(&StepId, &CanonicalValue)> {
        self.items
            .iter()
            .flat_map(|(s, i)| i.refuted_values().map(move |v| (s, v)))
            .collect()
    }

    /// `(step, value)` resolutions of supported items.
    pub fn supported_statements(&self) -> Vec<(&StepId, &CanonicalValue)> {
        self.items
            .iter()
            .filter(|(_, i)| i.state == ConflictState::Supported)
            .filter_map(|(s, i)| i.supported_value().map(|v| (s, v)))
            .collect()
    }
}

/// Steps where two experts disagree, minus anchored steps.
pub fn conflicts(stmts: &[Statement], anchors: &AnchorSet) -> ConflictSet {
    let mut items = BTreeMap::new();
    for (step, groups) in step_groups(stmts) {
        if groups.len() < 2 || anchors.contains_step(&step) {
            continue;
        }
        let mut candidates: Vec<Candidate> = groups
            .into_iter()
            .map(|(value, experts)| Candidate {
                value,
                supporters: experts.into_iter().collect(),
                verdict: None,
            })
            .collect();
        // Stable sort keeps first appearance among equal counts.
        candidates.sort_by_key(|c| std::cmp::Reverse(c.supporters.len()));
        items.insert(
            step,
            ConflictItem {
                candidates,
                state: ConflictState::Open,
            },
        );
    }
    ConflictSet { items }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedConflict {
    pub step: StepId,
    pub dependents: usize,
    pub spread: f64,
    pub impact: f64,
}

/// Orders contested steps by `(1 + |dependents|) × confidence spread`,
/// highest first, ties by step id.
pub fn rank_conflicts(set: &ConflictSet, dag: &PlanDag, stmts: &[Statement]) -> Vec<RankedConflict> {
    let mut ranked: Vec<RankedConflict> = set
        .steps()
        .map(|step| {
            let dependents = dag.dependents_closure(step).map_or(0, |c| c.len());
            let confs = stmts.iter().filter(|s| &s.step == step).map(|s| s.confidence);
            let (lo, hi) = confs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c), hi.max(c))
            });
            let spread = if hi >= lo { hi - lo } else { 0.0 };
            RankedConflict {
                step: step.clone(),
                dependents,
                spread,
                impact: (1 + dependents) as f64 * spread,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.impact.total_cmp(&a.impact).then_with(|| a.step.cmp(&b.step)));
    ranked
}

// ── Auditing ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditBudget {
    b_max: usize,
    consumed: usize,
}

impl AuditBudget {
    pub fn new(b_max: usize) -> Self {
        AuditBudget { b_max, consumed: 0 }
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn exhausted(&self) -> bool {
        self.consumed >= self.b_max
    }

    fn consume(&mut self) {
        assert!(!self.exhausted(), "audit budget overrun");
        self.consumed += 1;
    }
}

/// Shared, read-only verification resources.
pub struct AuditResources<'a> {
    pub operators: &'a OperatorRegistry,
    pub tools: &'a dyn ToolRunner,
    pub facts: &'a FactsStore,
    pub constraints: &'a ConstraintSet,
}

fn state_name(s: ConflictState) -> serde_json::Value {
    json!(s)
}

/// Spends the budget on ranked contested steps.
///
/// Each step's candidates are verified in order until one is supported
/// (anchored, item supported) or all are tried (item refuted if any
/// candidate was refuted, inconclusive otherwise). One verify call costs one
/// budget unit; the loop stops as soon as the budget is spent.
pub fn audit(
    ranked: &[RankedConflict],
    anchors: &mut AnchorSet,
    set: &mut ConflictSet,
    budget: &mut AuditBudget,
    res: &AuditResources<'_>,
    log: &mut AuditLog,
) {
    'steps: for r in ranked {
        if budget.exhausted() {
            log.append(
                Stage::Audit,
                "budget_exhausted",
                payload([
                    ("b", json!(budget.consumed())),
                    ("next_step", json!(r.step)),
                ]),
                vec![],
            );
            break;
        }
        let n_candidates = match set.items.get(&r.step) {
            Some(item) if item.state == ConflictState::Open => item.candidates.len(),
            _ => continue,
        };
        for ci in 0..n_candidates {
            if budget.exhausted() {
                log.append(
                    Stage::Audit,
                    "budget_exhausted",
                    payload([
                        ("b", json!(budget.consumed())),
                        ("next_step", json!(r.step)),
                    ]),
                    vec![],
                );
                break 'steps;
            }
            let statement = ContestedStatement {
                step: r.step.clone(),
                value: set.items[&r.step].candidates[ci].value.clone(),
            };
            let outcome = {
                let ctx = VerifyContext {
                    anchors,
                    tools: res.tools,
                    facts: res.facts,
                    constraints: res.constraints,
                };
                verify(&statement, &ctx, res.operators)
            };
            budget.consume();
            for e in &outcome.operator_errors {
                log.append(
                    Stage::Audit,
                    "operator_error",
                    payload([
                        ("operator", json!(e.operator)),
                        ("message", json!(e.message)),
                        ("step", json!(r.step)),
                    ]),
                    vec![format!("step:{}", r.step)],
                );
            }
            let verdict = outcome.verdict;
            log.append(
                Stage::Audit,
                "verify",
                payload([
                    ("step", json!(r.step)),
                    ("value", json!(statement.value)),
                    ("verdict", json!(verdict.value)),
                    ("cost", json!(verdict.cost)),
                    ("decided_by", json!(verdict.decided_by)),
                    ("evidence", json!(verdict.evidence)),
                    ("b", json!(budget.consumed())),
                ]),
                vec![format!("step:{}", r.step)],
            );
            let item = set.items.get_mut(&r.step).expect("ranked from this set");
            item.candidates[ci].verdict = Some(verdict.value);
            if verdict.value == VerdictValue::Support {
                anchors.insert(r.step.clone(), statement.value.clone());
                item.state = ConflictState::Supported;
                log.append(
                    Stage::Audit,
                    "promote",
                    payload([("step", json!(r.step)), ("value", json!(statement.value))]),
                    vec![format!("step:{}", r.step)],
                );
                log.append(
                    Stage::Audit,
                    "state",
                    payload([
                        ("step", json!(r.step)),
                        ("from", state_name(ConflictState::Open)),
                        ("to", state_name(ConflictState::Supported)),
                    ]),
                    vec![format!("step:{}", r.step)],
                );
                continue 'steps;
            }
        }
        let item = set.items.get_mut(&r.step).expect("ranked from this set");
        let to = if item.candidates.iter().any(|c| c.verdict == Some(VerdictValue::Refute)) {
            ConflictState::Refuted
        } else {
            ConflictState::Inconclusive
        };
        item.state = to;
        log.append(
            Stage::Audit,
            "state",
            payload([
                ("step", json!(r.step)),
                ("from", state_name(ConflictState::Open)),
                ("to", state_name(to)),
            ]),
            vec![format!("step:{}", r.step)],
        );
    }
}

// ── Synthesis ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisWeights {
    pub anchor: f64,
    pub conflict: f64,
    pub confidence: f64,
}

impl Default for SynthesisWeights {
    fn default() -> Self {
        SynthesisWeights {
            anchor: 0.5,
            conflict: 0.3,
            confidence: 0.2,
        }
    }
}

impl SynthesisWeights {
    pub fn new(anchor: f64, conflict: f64, confidence: f64) -> Self {
        SynthesisWeights {
            anchor,
            conflict,
            confidence,
        }
    }

    pub fn scaled(self, k: f64) -> Self {
        SynthesisWeights::new(self.anchor * k, self.conflict * k, self.confidence * k)
    }

    pub fn validate(&self) -> Result<(), CamvError> {
        let ws = [self.anchor, self.conflict, self.confidence];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(CamvError::InvalidConfig(format!(
                "weights must be nonnegative with a positive sum, got {ws:?}"
            )));
        }
        Ok(())
    }

    /// Rescaled to sum to one.
    pub fn normalized(&self) -> Self {
        let sum = self.anchor + self.conflict + self.confidence;
        SynthesisWeights::new(self.anchor / sum, self.conflict / sum, self.confidence / sum)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisScore {
    pub anchor_support: f64,
    pub conflict_agreement: f64,
    pub mean_confidence: f64,
    pub total: f64,
}

/// Scores one candidate trace.
///
/// With no anchors the anchor term is 1.0; with no resolved conflicts the
/// conflict term is 0.5. `skip` removes statements from consideration.
pub fn score_candidate(
    candidate: &RetainedTrace,
    anchors: &AnchorSet,
    set: &ConflictSet,
    weights: &SynthesisWeights,
    skip: &dyn Fn(&StepId, &CanonicalValue) -> bool,
) -> SynthesisScore {
    let asserts = |s: &StepId, v: &CanonicalValue| candidate.asserts(s, v) && !skip(s, v);

    let anchor_support = if anchors.is_empty() {
        1.0
    } else {
        anchors.iter().filter(|(s, v)| asserts(s, v)).count() as f64 / anchors.len() as f64
    };

    let supported = set.supported_statements();
    let refuted = set.refuted_statements();
    let agree = if supported.is_empty() {
        0.0
    } else {
        supported.iter().filter(|(s, v)| asserts(s, v)).count() as f64 / supported.len() as f64
    };
    let asserted_refuted = if refuted.is_empty() {
        0.0
    } else {
        refuted.iter().filter(|(s, v)| asserts(s, v)).count() as f64 / refuted.len() as f64
    };
    let conflict_agreement = (agree - asserted_refuted + 1.0) / 2.0;

    let kept: Vec<f64> = candidate
        .output
        .intermediates
        .iter()
        .filter(|(s, r)| !skip(s, &r.value))
        .map(|(_, r)| r.confidence)
        .collect();
    let mean_confidence = if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };

    let w = weights.normalized();
    SynthesisScore {
        anchor_support,
        conflict_agreement,
        mean_confidence,
        total: w.anchor * anchor_support
            + w.conflict * conflict_agreement
            + w.confidence * mean_confidence,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub answer: CanonicalValue,
    pub chosen: TraceRef,
    pub score: SynthesisScore,
    /// True when every candidate asserted a refuted statement and scoring
    /// fell back to non-refuted micro-inferences.
    pub fallback: bool,
    pub scores: Vec<(TraceRef, SynthesisScore)>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no feasible candidate response")]
pub struct NoFeasibleCandidateError;

fn near_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Argmax of the score over candidates whose response is feasible.
/// Ties go to the lowest expert id (then trace index).
pub fn synthesize(
    candidates: &[RetainedTrace],
    anchors: &AnchorSet,
    set: &ConflictSet,
    constraints: &ConstraintSet,
    weights: &SynthesisWeights,
) -> Result<Synthesis, NoFeasibleCandidateError> {
    let mut feasible: Vec<&RetainedTrace> = candidates
        .iter()
        .filter(|c| constraints.check_response(&c.output.response))
        .collect();
    if feasible.is_empty() {
        return Err(NoFeasibleCandidateError);
    }
    feasible.sort_by(|a, b| a.trace.cmp(&b.trace));

    let refuted = set.refuted_statements();
    let all_faulty = !refuted.is_empty()
        && feasible
            .iter()
            .all(|c| refuted.iter().any(|(s, v)| c.asserts(s, v)));
    let skip_refuted = |s: &StepId, v: &CanonicalValue| {
        refuted.iter().any(|(rs, rv)| *rs == s && rv.canonical_eq(v))
    };
    let keep_all = |_: &StepId, _: &CanonicalValue| false;
    let skip: &dyn Fn(&StepId, &CanonicalValue) -> bool =
        if all_faulty { &skip_refuted } else { &keep_all };

    let scores: Vec<(TraceRef, SynthesisScore)> = feasible
        .iter()
        .map(|c| (c.trace.clone(), score_candidate(c, anchors, set, weights, skip)))
        .collect();
    let mut best = 0;
    for i in 1..scores.len() {
        let (cur, top) = (scores[i].1.total, scores[best].1.total);
        if cur > top && !near_tie(cur, top) {
            best = i;
        }
    }
    Ok(Synthesis {
        answer: feasible[best].output.response.clone(),
        chosen: scores[best].0.clone(),
        score: scores[best].1,
        fallback: all_faulty,
        scores,
    })
}

// ── Full pipeline ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamvConfig {
    pub theta: usize,
    /// `None` audits up to `min(|S_c|, 16)` statements.
    pub b_max: Option<usize>,
    pub gate_threshold: f64,
    pub weights: SynthesisWeights,
    pub seed: u64,
    /// Gate statements against verified facts.
    pub use_facts: bool,
    pub traces_per_expert: usize,
}

impl Default for CamvConfig {
    fn default() -> Self {
        CamvConfig {
            theta: DEFAULT_THETA,
            b_max: None,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
            weights: SynthesisWeights::default(),
            seed: 0,
            use_facts: true,
            traces_per_expert: 1,
        }
    }
}

impl CamvConfig {
    pub fn validate(&self) -> Result<(), CamvError> {
        if self.theta < 2 {
            return Err(CamvError::InvalidTheta(self.theta));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(CamvError::InvalidConfig(format!(
                "gate threshold {} outside [0, 1]",
                self.gate_threshold
            )));
        }
        if self.traces_per_expert == 0 {
            return Err(CamvError::InvalidConfig("traces_per_expert must be >= 1".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CamvError {
    #[error("theta must be at least 2, got {0}")]
    InvalidTheta(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    AllExpertsFailed(#[from] AllExpertsFailedError),
    #[error(transparent)]
    NoFeasibleCandidate(#[from] NoFeasibleCandidateError),
}

/// Inputs shared by one run.
pub struct CamvInput<'a> {
    pub query: &'a str,
    pub dag: &'a PlanDag,
    pub constraints: &'a ConstraintSet,
    pub experts: &'a [ExpertConfig],
    pub backend: &'a dyn ExpertBackend,
    pub operators: &'a OperatorRegistry,
    pub tools: &'a dyn ToolRunner,
    pub facts: &'a FactsStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    ResponseInfeasible,
    BelowThreshold,
}

/// A trace rejected by the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub trace: TraceRef,
    pub gate_score: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamvOutput {
    pub answer: CanonicalValue,
    pub chosen: TraceRef,
    pub score: SynthesisScore,
    pub anchors: AnchorSet,
    pub conflicts: ConflictSet,
    pub screening_log: Vec<Screening>,
    pub retained: Vec<RetainedTrace>,
    pub budget: AuditBudget,
    pub verify_calls: usize,
    pub synthesis_fallback: bool,
    pub eba_fallback: bool,
}

/// Runs all four stages. Events go to `log`, which stays populated even
/// when the run ends in an error.
pub fn run_camv(
    input: &CamvInput<'_>,
    config: &CamvConfig,
    log: &mut AuditLog,
) -> Result<CamvOutput, CamvError> {
    config.validate()?;
    log.append(
        Stage::Ensemble,
        "run_start",
        payload([
            ("query", json!(input.query)),
            ("experts", json!(input.experts.len())),
            ("theta", json!(config.theta)),
            ("b_max", json!(config.b_max)),
            ("gate_threshold", json!(config.gate_threshold)),
            ("weights", json!(config.weights)),
            ("seed", json!(config.seed)),
            ("use_facts", json!(config.use_facts)),
        ]),
        vec![],
    );
    log.append(
        Stage::Facts,
        "snapshot",
        payload([
            ("version", json!(input.facts.version())),
            ("tools", json!(input.facts.tools().count())),
            ("facts", json!(input.facts.facts().count())),
        ]),
        vec![],
    );

    let outputs = collect(
        input.query,
        input.experts,
        input.backend,
        config.traces_per_expert,
        log,
    )?;

    // Stage 1: constraint-based pruning.
    let facts = config.use_facts.then_some(input.facts);
    let mut per_expert: BTreeMap<ExpertId, usize> = BTreeMap::new();
    let mut sampled = Vec::new();
    let mut retained = Vec::new();
    let mut screening_log = Vec::new();
    for out in outputs {
        let index = {
            let n = per_expert.entry(out.expert_id.clone()).or_default();
            *n += 1;
            *n - 1
        };
        let g = gate(&out, input.dag, input.constraints, facts, config.gate_threshold);
        let trace = TraceRef {
            expert_id: out.expert_id.clone(),
            index,
        };
        log.append(
            Stage::Gate,
            "gate",
            payload([
                ("trace", json!(trace.to_string())),
                ("gate_score", json!(g.gate_score)),
                ("response_ok", json!(g.response_ok)),
                ("failing", json!(g.failing)),
                ("accepted", json!(!g.rejected())),
            ]),
            vec![format!("expert:{}", trace.expert_id)],
        );
        if !g.removed.is_empty() {
            log.append(
                Stage::Prune,
                "excise",
                payload([
                    ("trace", json!(trace.to_string())),
                    ("removed", json!(g.removed)),
                ]),
                vec![format!("expert:{}", trace.expert_id)],
            );
        }
        match g.filtered_trace {
            Some(kept) => retained.push(RetainedTrace {
                trace: trace.clone(),
                output: kept,
                gate_score: g.gate_score,
            }),
            None => {
                let reason = if g.response_ok {
                    RejectReason::BelowThreshold
                } else {
                    RejectReason::ResponseInfeasible
                };
                log.append(
                    Stage::Gate,
                    "reject",
                    payload([
                        ("trace", json!(trace.to_string())),
                        ("reason", json!(reason)),
                    ]),
                    vec![format!("expert:{}", trace.expert_id)],
                );
                screening_log.push(Screening {
                    trace: trace.clone(),
                    gate_score: g.gate_score,
                    reason,
                });
            }
        }
        sampled.push((trace, out));
    }

    let mut eba_fallback = false;
    if retained.is_empty() {
        eba_fallback = true;
        for (trace, out) in &sampled {
            let ex = excise(out, input.dag, input.constraints, facts);
            if !ex.response_ok {
                continue;
            }
            log.append(
                Stage::Prune,
                "eba_backtrack",
                payload([
                    ("trace", json!(trace.to_string())),
                    ("removed", json!(ex.removed)),
                    ("kept", json!(ex.kept.intermediates.len())),
                ]),
                vec![format!("expert:{}", trace.expert_id)],
            );
            retained.push(RetainedTrace {
                trace: trace.clone(),
                output: ex.kept,
                gate_score: ex.gate_score,
            });
        }
        if retained.is_empty() {
            log.append(
                Stage::Prune,
                "infeasible",
                payload([("sampled", json!(sampled.len()))]),
                vec![],
            );
            return Err(NoFeasibleCandidateError.into());
        }
    }

    // Stage 2: consensus anchoring.
    let stmts = statements(&retained);
    let anchoring = anchor(&stmts, config.theta)?;
    for (step, value) in anchoring.anchors.iter() {
        log.append(
            Stage::Anchor,
            "anchor",
            payload([
                ("step", json!(step)),
                ("value", json!(value)),
                ("support", json!(anchoring.support[step])),
            ]),
            vec![format!("step:{step}")],
        );
    }
    for step in &anchoring.ties {
        log.append(
            Stage::Anchor,
            "anchor_tie",
            payload([("step", json!(step))]),
            vec![format!("step:{step}")],
        );
    }
    let mut anchors = anchoring.anchors;

    // Stage 3: conflict auditing.
    let mut set = conflicts(&stmts, &anchors);
    for (step, item) in set.iter() {
        log.append(
            Stage::Audit,
            "conflict_open",
            payload([
                ("step", json!(step)),
                ("candidates", json!(item.candidates)),
            ]),
            vec![format!("step:{step}")],
        );
    }
    let ranked = rank_conflicts(&set, input.dag, &stmts);
    let b_max = config.b_max.unwrap_or(set.len().min(DEFAULT_BUDGET_CAP));
    if !ranked.is_empty() {
        log.append(
            Stage::Audit,
            "rank",
            payload([("order", json!(ranked)), ("b_max", json!(b_max))]),
            vec![],
        );
    }
    let mut budget = AuditBudget::new(b_max);
    let resources = AuditResources {
        operators: input.operators,
        tools: input.tools,
        facts: input.facts,
        constraints: input.constraints,
    };
    audit(&ranked, &mut anchors, &mut set, &mut budget, &resources, log);

    // Stage 4: integrative synthesis.
    let synthesis = synthesize(&retained, &anchors, &set, input.constraints, &config.weights);
    let synthesis = match synthesis {
        Ok(s) => s,
        Err(e) => {
            log.append(Stage::Synthesize, "abstain", Default::default(), vec![]);
            return Err(e.into());
        }
    };
    for (trace, score) in &synthesis.scores {
        log.append(
            Stage::Synthesize,
            "score",
            payload([("trace", json!(trace.to_string())), ("score", json!(score))]),
            vec![format!("expert:{}", trace.expert_id)],
        );
    }
    log.append(
        Stage::Synthesize,
        "answer",
        payload([
            ("trace", json!(synthesis.chosen.to_string())),
            ("answer", json!(synthesis.answer)),
            ("total", json!(synthesis.score.total)),
            ("fallback", json!(synthesis.fallback)),
            ("verify_calls", json!(budget.consumed())),
        ]),
        vec![format!("expert:{}", synthesis.chosen.expert_id)],
    );

    Ok(CamvOutput {
        answer: synthesis.answer,
        chosen: synthesis.chosen,
        score: synthesis.score,
        anchors,
        conflicts: set,
        screening_log,
        retained,
        verify_calls: budget.consumed(),
        budget,
        synthesis_fallback: synthesis.fallback,
        eba_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan_dag::{build_plan, StepResult};
    use crate::tools::ScriptedTools;
    use crate::verifier::VerdictTable;

    fn trace(id: &str, steps: &[(&str, f64, f64)], response: f64) -> RetainedTrace {
        let output = ExpertOutput {
            expert_id: id.into(),
            intermediates: steps
                .iter()
                .map(|&(s, v, c)| (StepId::from(s), StepResult::new(v, c)))
                .collect(),
            analysis: String::new(),
            response: response.into(),
        };
        RetainedTrace::new(output, 0, 1.0)
    }

    fn at_s(values: &[f64]) -> Vec<RetainedTrace> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| trace(&format!("e{:03}", i + 1), &[("s", v, 0.5)], v))
            .collect()
    }

    struct World {
        facts: FactsStore,
        tools: ScriptedTools,
        constraints: ConstraintSet,
        registry: OperatorRegistry,
    }

    impl World {
        fn new(table: VerdictTable) -> Self {
            let mut registry = OperatorRegistry::new();
            registry.register(Box::new(table)).unwrap();
            World {
                facts: FactsStore::new(),
                tools: ScriptedTools::new(),
                constraints: ConstraintSet::new(),
                registry,
            }
        }

        fn resources(&self) -> AuditResources<'_> {
            AuditResources {
                operators: &self.registry,
                tools: &self.tools,
                facts: &self.facts,
                constraints: &self.constraints,
            }
        }
    }

    #[test]
    fn statements_count_every_intermediate() {
        let a = trace("e001", &[("s1", 1.0, 0.9), ("s2", 2.0, 0.9), ("s3", 3.0, 0.9)], 3.0);
        let b = trace("e002", &[("s1", 1.0, 0.8), ("s2", 2.0, 0.8), ("s3", 3.0, 0.8)], 3.0);
        let stmts = statements(&[a, b]);
        assert_eq!(stmts.len(), 6);
        assert!(statements(&[]).is_empty());
    }

    #[test]
    fn anchoring_thresholds() {
        let stmts = statements(&at_s(&[42.0, 42.0, 17.0]));
        let a2 = anchor(&stmts, 2).unwrap();
        assert_eq!(a2.anchors.get(&"s".into()), Some(&42.0.into()));
        assert!(anchor(&stmts, 3).unwrap().anchors.is_empty());
        assert_eq!(anchor(&stmts, 1), Err(CamvError::InvalidTheta(1)));
    }

    #[test]
    fn anchor_collisions() {
        let tie = anchor(&statements(&at_s(&[1.0, 1.0, 2.0, 2.0])), 2).unwrap();
        assert!(tie.anchors.is_empty());
        assert_eq!(tie.ties, vec![StepId::from("s")]);
        let win = anchor(&statements(&at_s(&[1.0, 2.0, 1.0, 2.0, 1.0])), 2).unwrap();
        assert_eq!(win.anchors.get(&"s".into()), Some(&1.0.into()));
    }

    #[test]
    fn conflicts_exclude_agreement_and_anchors() {
        let same = statements(&at_s(&[5.0, 5.0]));
        assert!(conflicts(&same, &AnchorSet::new(2)).is_empty());

        let split = statements(&at_s(&[42.0, 17.0]));
        let anchors = anchor(&split, 2).unwrap().anchors;
        let set = conflicts(&split, &anchors);
        let item = set.get(&"s".into()).unwrap();
        assert_eq!(item.candidates.len(), 2);
        assert_eq!(item.state, ConflictState::Open);

        let minority = statements(&at_s(&[42.0, 42.0, 17.0]));
        let anchors = anchor(&minority, 2).unwrap().anchors;
        assert!(conflicts(&minority, &anchors).is_empty());
    }

    #[test]
    fn root_conflict_outranks_sink() {
        let dag = build_plan(
            ["r", "a", "b", "z"].map(StepId::from).to_vec(),
            vec![("r".into(), "a".into()), ("a".into(), "b".into()), ("b".into(), "z".into())],
        )
        .unwrap();
        let t1 = trace("e001", &[("r", 1.0, 0.9), ("z", 1.0, 0.9)], 0.0);
        let t2 = trace("e002", &[("r", 2.0, 0.5), ("z", 2.0, 0.5)], 0.0);
        let stmts = statements(&[t1, t2]);
        let set = conflicts(&stmts, &AnchorSet::new(2));
        let ranked = rank_conflicts(&set, &dag, &stmts);
        let order: Vec<&str> = ranked.iter().map(|r| r.step.as_str()).collect();
        assert_eq!(order, ["r", "z"]);
        assert_eq!(ranked[0].dependents, 3);
        assert!((ranked[0].impact - 4.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn equal_impacts_rank_by_step_id() {
        let dag = PlanDag::empty();
        let t1 = trace("e001", &[("b", 1.0, 0.5), ("a", 1.0, 0.5)], 0.0);
        let t2 = trace("e002", &[("b", 2.0, 0.5), ("a", 2.0, 0.5)], 0.0);
        let stmts = statements(&[t1, t2]);
        let ranked = rank_conflicts(&conflicts(&stmts, &AnchorSet::new(2)), &dag, &stmts);
        let order: Vec<&str> = ranked.iter().map(|r| r.step.as_str()).collect();
        assert_eq!(order, ["a", "b"]);
    }

    #[test]
    fn budget_caps_verify_calls() {
        let steps: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let row = |v: f64| steps.iter().map(|s| (s.as_str(), v, 0.5)).collect::<Vec<_>>();
        let t1 = trace("e001", &row(1.0), 1.0);
        let t2 = trace("e002", &row(2.0), 2.0);
        let stmts = statements(&[t1, t2]);
        let mut anchors = AnchorSet::new(2);
        let mut set = conflicts(&stmts, &anchors);
        assert_eq!(set.len(), 10);
        let mut table = VerdictTable::new();
        for s in &steps {
            table.insert(s.as_str().into(), 1.0.into(), VerdictValue::Support);
        }
        let world = World::new(table);
        let ranked = rank_conflicts(&set, &PlanDag::empty(), &stmts);
        let mut budget = AuditBudget::new(3);
        let mut log = AuditLog::new();
        audit(&ranked, &mut anchors, &mut set, &mut budget, &world.resources(), &mut log);
        assert_eq!(log.events("verify").count(), 3);
        assert_eq!(budget.consumed(), 3);
        assert_eq!(set.count_state(ConflictState::Open), 7);
        assert_eq!(anchors.len(), 3);
    }

    #[test]
    fn refuted_majority_yields_to_supported_minority() {
        let mut traces = at_s(&[9.0, 9.0, 4.0]);
        for t in &mut traces[..2] {
            t.output.intermediates.get_mut(&StepId::from("s")).unwrap().confidence = 0.9;
        }
        let stmts = statements(&traces);
        let mut anchors = anchor(&stmts, 3).unwrap().anchors;
        let mut set = conflicts(&stmts, &anchors);
        let world = World::new(
            VerdictTable::new()
                .with("s", 9.0, VerdictValue::Refute)
                .with("s", 4.0, VerdictValue::Support),
        );
        let ranked = rank_conflicts(&set, &PlanDag::empty(), &stmts);
        let mut budget = AuditBudget::new(2);
        let mut log = AuditLog::new();
        audit(&ranked, &mut anchors, &mut set, &mut budget, &world.resources(), &mut log);
        assert_eq!(anchors.get(&"s".into()), Some(&4.0.into()));
        let item = set.get(&"s".into()).unwrap();
        assert_eq!(item.state, ConflictState::Supported);
        assert_eq!(item.candidates[0].value, 9.0.into());
        assert_eq!(item.candidates[0].verdict, Some(VerdictValue::Refute));

        let syn = synthesize(&traces, &anchors, &set, &world.constraints, &SynthesisWeights::default())
            .unwrap();
        assert_eq!(syn.answer, 4.0.into());
    }

    #[test]
    fn single_expert_scores_vacuous_anchor_support() {
        let t = trace("e001", &[("s", 3.0, 0.8)], 3.0);
        let syn = synthesize(
            &[t],
            &AnchorSet::new(2),
            &ConflictSet::default(),
            &ConstraintSet::new(),
            &SynthesisWeights::default(),
        )
        .unwrap();
        assert_eq!(syn.answer, 3.0.into());
        assert_eq!(syn.score.anchor_support, 1.0);
        assert_eq!(syn.score.conflict_agreement, 0.5);
    }

    #[test]
    fn anchor_dominance_decides() {
        let a = trace("e002", &[("x", 1.0, 0.5), ("y", 1.0, 0.5), ("z", 1.0, 0.5)], 10.0);
        let b = trace("e001", &[("x", 1.0, 0.5), ("y", 2.0, 0.5), ("z", 2.0, 0.5)], 20.0);
        let mut anchors = AnchorSet::new(2);
        for s in ["x", "y", "z"] {
            anchors.insert(s.into(), 1.0.into());
        }
        let syn = synthesize(
            &[a, b],
            &anchors,
            &ConflictSet::default(),
            &ConstraintSet::new(),
            &SynthesisWeights::default(),
        )
        .unwrap();
        assert_eq!(syn.answer, 10.0.into());
    }

    #[test]
    fn ties_go_to_lowest_expert() {
        let a = trace("e002", &[("x", 1.0, 0.5)], 2.0);
        let b = trace("e001", &[("x", 1.0, 0.5)], 1.0);
        let syn = synthesize(
            &[a, b],
            &AnchorSet::new(2),
            &ConflictSet::default(),
            &ConstraintSet::new(),
            &SynthesisWeights::default(),
        )
        .unwrap();
        assert_eq!(syn.chosen.expert_id, ExpertId::from("e001"));
    }

    #[test]
    fn all_faulty_candidates_use_micro_inference_fallback() {
        let a = trace("e001", &[("x", 1.0, 0.9), ("y", 5.0, 0.2)], 1.0);
        let b = trace("e002", &[("x", 2.0, 0.9), ("y", 5.0, 0.9)], 2.0);
        let stmts = statements(&[a.clone(), b.clone()]);
        let mut set = conflicts(&stmts, &AnchorSet::new(2));
        for c in &mut set.items.get_mut(&StepId::from("x")).unwrap().candidates {
            c.verdict = Some(VerdictValue::Refute);
        }
        set.items.get_mut(&StepId::from("x")).unwrap().state = ConflictState::Refuted;
        let syn = synthesize(
            &[a, b],
            &AnchorSet::new(2),
            &set,
            &ConstraintSet::new(),
            &SynthesisWeights::default(),
        )
        .unwrap();
        assert!(syn.fallback);
        assert_eq!(syn.answer, 2.0.into());
    }

    #[test]
    fn no_feasible_response_is_an_error() {
        use crate::verifier::{CheckSpec, ConstraintKind, ConstraintScope, ConstraintSpec};
        let spec = ConstraintSpec {
            id: "pos".into(),
            kind: ConstraintKind::Schema,
            scope: ConstraintScope::Response,
            check: CheckSpec::Range { min: Some(0.0), max: None },
            description: String::new(),
        };
        let constraints = ConstraintSet::from_specs([&spec]).unwrap();
        let t = trace("e001", &[], -1.0);
        let r = synthesize(
            &[t],
            &AnchorSet::new(2),
            &ConflictSet::default(),
            &constraints,
            &SynthesisWeights::default(),
        );
        assert_eq!(r, Err(NoFeasibleCandidateError));
    }

    fn run_with(traces: Vec<RetainedTrace>, table: VerdictTable, config: &CamvConfig) -> (Result<CamvOutput, CamvError>, AuditLog) {
        use crate::ensemble::ScriptedBackend;
        let mut steps: Vec<StepId> = traces
            .iter()
            .flat_map(|t| t.output.intermediates.keys().cloned())
            .collect();
        steps.sort();
        steps.dedup();
        let dag = build_plan(steps, vec![]).unwrap();
        let mut backend = ScriptedBackend::new();
        let mut experts = Vec::new();
        for t in traces {
            experts.push(ExpertConfig {
                expert_id: t.output.expert_id.clone(),
                class: crate::ensemble::ExpertClass::Radical,
                temperature: 0.8,
                seed: 0,
            });
            backend = backend.with_traces(t.output.expert_id.clone(), vec![t.output]);
        }
        let world = World::new(table);
        let input = CamvInput {
            query: "q",
            dag: &dag,
            constraints: &world.constraints,
            experts: &experts,
            backend: &backend,
            operators: &world.registry,
            tools: &world.tools,
            facts: &world.facts,
        };
        let mut log = AuditLog::new();
        (run_camv(&input, config, &mut log), log)
    }

    #[test]
    fn unanimous_run_skips_auditing() {
        let (out, log) = run_with(at_s(&[7.0, 7.0, 7.0]), VerdictTable::new(), &CamvConfig::default());
        let out = out.unwrap();
        assert_eq!(out.answer, 7.0.into());
        assert!(out.conflicts.is_empty());
        assert_eq!(out.verify_calls, 0);
        assert_eq!(log.count_stage(Stage::Audit), 0);
    }

    #[test]
    fn zero_budget_runs_on_anchors_alone() {
        let config = CamvConfig {
            b_max: Some(0),
            ..CamvConfig::default()
        };
        let (out, _) = run_with(at_s(&[1.0, 2.0]), VerdictTable::new().with("s", 2.0, VerdictValue::Support), &config);
        let out = out.unwrap();
        assert_eq!(out.verify_calls, 0);
        assert_eq!(out.conflicts.count_state(ConflictState::Open), 1);
    }

    #[test]
    fn adversarial_majority_is_overturned() {
        let mut traces = at_s(&[9.0, 9.0, 4.0]);
        for t in &mut traces[..2] {
            t.output.intermediates.get_mut(&StepId::from("s")).unwrap().confidence = 0.9;
        }
        let config = CamvConfig {
            theta: 3,
            b_max: Some(2),
            ..CamvConfig::default()
        };
        let table = VerdictTable::new()
            .with("s", 9.0, VerdictValue::Refute)
            .with("s", 4.0, VerdictValue::Support);
        let (out, _) = run_with(traces, table, &config);
        let out = out.unwrap();
        assert_eq!(out.answer, 4.0.into());
        assert_eq!(out.verify_calls, 2);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = CamvConfig {
            weights: SynthesisWeights::new(0.0, 0.0, 0.0),
            ..CamvConfig::default()
        };
        let (out, _) = run_with(at_s(&[1.0]), VerdictTable::new(), &config);
        assert!(matches!(out, Err(CamvError::InvalidConfig(_))));
    }
}
