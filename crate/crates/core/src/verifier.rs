//! Falsification toolkit: constraints, the trace gate, and verify operators.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camv::AnchorSet;
use crate::ensemble::ExpertOutput;
use crate::facts::{ConsistencyVerdict, FactsStore};
use crate::plan_dag::{PlanDag, StepId};
use crate::tools::ToolRunner;
use crate::value::{CanonicalValue, ValueKind};

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.5;

// ── Constraints ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Schema,
    Unit,
    Invariant,
    Consistency,
}

/// Where a constraint applies. Step patterns accept `*` wildcards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintScope {
    Step(String),
    Response,
}

pub type Predicate = Arc<dyn Fn(&CanonicalValue) -> bool + Send + Sync>;

/// A deterministic, side-effect-free check over one value.
#[derive(Clone)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    pub scope: ConstraintScope,
    pub description: String,
    predicate: Predicate,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Constraint")
            .field("id", &self.id)
            .field("kind", &self.kind)
            .field("scope", &self.scope)
            .field("description", &self.description)
            .finish_non_exhaustive()
    }
}

impl Constraint {
    pub fn new(
        id: impl Into<String>,
        kind: ConstraintKind,
        scope: ConstraintScope,
        description: impl Into<String>,
        predicate: impl Fn(&CanonicalValue) -> bool + Send + Sync + 'static,
    ) -> Self {
        Constraint {
            id: id.into(),
            kind,
            scope,
            description: description.into(),
            predicate: Arc::new(predicate),
        }
    }

    pub fn holds(&self, value: &CanonicalValue) -> bool {
        (self.predicate)(value)
    }

    pub fn applies_to_step(&self, step: &StepId) -> bool {
        match &self.scope {
            ConstraintScope::Step(pattern) => glob_match(pattern, step.as_str()),
            ConstraintScope::Response => false,
        }
    }
}

/// `*` matches any run of characters; everything else is literal.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(pos) => rest = &rest[pos + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Serializable built-in checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CheckSpec {
    /// Numeric payload within `[min, max]`; non-numeric values fail.
    Range {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
    },
    /// Text matching a regular expression.
    Pattern { regex: String },
    /// Quantity carrying exactly this unit tag.
    Unit { unit: String },
    ValueKind { kind: ValueKind },
    OneOf { values: Vec<CanonicalValue> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub id: String,
    pub kind: ConstraintKind,
    pub scope: ConstraintScope,
    pub check: CheckSpec,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("constraint `{id}`: bad regex: {message}")]
    Regex { id: String, message: String },
    #[error("duplicate constraint id `{0}`")]
    DuplicateId(String),
}

impl ConstraintSpec {
    pub fn compile(&self) -> Result<Constraint, ConstraintError> {
        let check: Box<dyn Fn(&CanonicalValue) -> bool + Send + Sync> = match &self.check {
            CheckSpec::Range { min, max } => {
                let (min, max) = (*min, *max);
                Box::new(move |v| match v.as_f64() {
                    Some(x) => min.is_none_or(|m| x >= m) && max.is_none_or(|m| x <= m),
                    None => false,
                })
            }
            CheckSpec::Pattern { regex } => {
                let re = Regex::new(regex).map_err(|e| ConstraintError::Regex {
                    id: self.id.clone(),
                    message: e.to_string(),
                })?;
                Box::new(move |v| matches!(v, CanonicalValue::Text(s) if re.is_match(s)))
            }
            CheckSpec::Unit { unit } => {
                let want = unit.trim().to_lowercase();
                Box::new(move |v| v.unit().is_some_and(|u| u.trim().to_lowercase() == want))
            }
            CheckSpec::ValueKind { kind } => {
                let kind = *kind;
                Box::new(move |v| v.kind() == kind)
            }
            CheckSpec::OneOf { values } => {
                let values = values.clone();
                Box::new(move |v| values.iter().any(|x| x.canonical_eq(v)))
            }
        };
        Ok(Constraint::new(
            self.id.clone(),
            self.kind,
            self.scope.clone(),
            self.description.clone(),
            check,
        ))
    }
}

/// The constraint set 𝒦 of a scenario, in declaration order.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, c: Constraint) -> Result<(), ConstraintError> {
        if self.constraints.iter().any(|x| x.id == c.id) {
            return Err(ConstraintError::DuplicateId(c.id));
        }
        self.constraints.push(c);
        Ok(())
    }

    pub fn from_specs<'a>(
        specs: impl IntoIterator<Item = &'a ConstraintSpec>,
    ) -> Result<Self, ConstraintError> {
        let mut set = Self::new();
        for s in specs {
            set.push(s.compile()?)?;
        }
        Ok(set)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constraint> {
        self.constraints.iter()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Step-scoped constraints that apply to `step` and reject `value`.
    pub fn failing_for_step<'a>(
        &'a self,
        step: &'a StepId,
        value: &'a CanonicalValue,
    ) -> impl Iterator<Item = &'a Constraint> + 'a {
        self.constraints
            .iter()
            .filter(move |c| c.applies_to_step(step) && !c.holds(value))
    }

    /// A response is feasible when every response-scope constraint holds.
    pub fn check_response(&self, response: &CanonicalValue) -> bool {
        self.constraints
            .iter()
            .filter(|c| c.scope == ConstraintScope::Response)
            .all(|c| c.holds(response))
    }
}

// ── Gate ─────────────────────────────────────────────────────

/// A trace with failing statements and their dependents cut out.
#[derive(Debug, Clone, PartialEq)]
pub struct Excision {
    pub kept: ExpertOutput,
    /// Statements that themselves violate a constraint or a verified fact.
    pub failing: BTreeSet<StepId>,
    /// Statements cut from the trace (failing plus downstream).
    pub removed: BTreeSet<StepId>,
    pub response_ok: bool,
    /// Fraction of the trace's statements that survive.
    pub gate_score: f64,
}

/// Cuts failing statements and their plan dependents from a trace.
///
/// With `facts`, a statement also fails when it contradicts a verified fact
/// keyed by its step id.
pub fn excise(
    trace: &ExpertOutput,
    dag: &PlanDag,
    constraints: &ConstraintSet,
    facts: Option<&FactsStore>,
) -> Excision {
    let mut failing = BTreeSet::new();
    for (step, result) in &trace.intermediates {
        let violates = constraints.failing_for_step(step, &result.value).next().is_some();
        let contradicts = facts.is_some_and(|f| {
            f.check_consistency(step.as_str(), &result.value).verdict()
                == ConsistencyVerdict::Conflict
        });
        if violates || contradicts {
            failing.insert(step.clone());
        }
    }

    let (in_dag, off_dag): (BTreeSet<StepId>, BTreeSet<StepId>) =
        failing.iter().cloned().partition(|s| dag.contains(s));
    let backtrack = dag
        .eba_backtrack(&trace.intermediates, &in_dag)
        .expect("violations restricted to plan steps");
    let mut removed = backtrack.removed;
    removed.extend(off_dag);
    let intermediates: BTreeMap<_, _> = backtrack
        .retained
        .into_iter()
        .filter(|(s, _)| !removed.contains(s))
        .collect();
    // Only count removals of statements the trace actually made.
    let removed: BTreeSet<StepId> = removed
        .into_iter()
        .filter(|s| trace.intermediates.contains_key(s))
        .collect();

    let total = trace.intermediates.len();
    let gate_score = if total == 0 {
        1.0
    } else {
        intermediates.len() as f64 / total as f64
    };
    Excision {
        kept: ExpertOutput {
            expert_id: trace.expert_id.clone(),
            intermediates,
            analysis: trace.analysis.clone(),
            response: trace.response.clone(),
        },
        failing,
        removed,
        response_ok: constraints.check_response(&trace.response),
        gate_score,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    /// `None` when the trace is rejected outright.
    pub filtered_trace: Option<ExpertOutput>,
    pub gate_score: f64,
    pub failing: BTreeSet<StepId>,
    pub removed: BTreeSet<StepId>,
    pub response_ok: bool,
}

impl GateResult {
    pub fn rejected(&self) -> bool {
        self.filtered_trace.is_none()
    }
}

/// Stage-1 screen: rejects traces whose response is infeasible or whose
/// surviving fraction falls below `threshold`; otherwise keeps the excised trace.
pub fn gate(
    trace: &ExpertOutput,
    dag: &PlanDag,
    constraints: &ConstraintSet,
    facts: Option<&FactsStore>,
    threshold: f64,
) -> GateResult {
    let ex = excise(trace, dag, constraints, facts);
    let accept = ex.response_ok && ex.gate_score >= threshold;
    GateResult {
        filtered_trace: accept.then_some(ex.kept),
        gate_score: ex.gate_score,
        failing: ex.failing,
        removed: ex.removed,
        response_ok: ex.response_ok,
    }
}

// ── Verdicts and operators ───────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    Support,
    Refute,
    Inconclusive,
}

impl VerdictValue {
    pub fn is_decisive(self) -> bool {
        !matches!(self, VerdictValue::Inconclusive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum EvidenceRef {
    Fact(String),
    Tool(String),
    Anchor(StepId),
    Constraint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub evidence: Vec<EvidenceRef>,
    /// Operators invoked to reach this verdict.
    pub cost: u32,
    /// Id of the deciding operator, if any.
    pub decided_by: Option<String>,
    pub scripted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutcome {
    pub value: VerdictValue,
    pub evidence: Vec<EvidenceRef>,
}

impl OperatorOutcome {
    pub fn inconclusive() -> Self {
        OperatorOutcome {
            value: VerdictValue::Inconclusive,
            evidence: Vec::new(),
        }
    }

    pub fn support(evidence: Vec<EvidenceRef>) -> Self {
        OperatorOutcome {
            value: VerdictValue::Support,
            evidence,
        }
    }

    pub fn refute(evidence: Vec<EvidenceRef>) -> Self {
        OperatorOutcome {
            value: VerdictValue::Refute,
            evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("operator `{operator}` failed: {message}")]
pub struct OperatorError {
    pub operator: String,
    pub message: String,
}

/// A statement under audit.
#[derive(Debug, Clone, PartialEq)]
pub struct ContestedStatement {
    pub step: StepId,
    pub value: CanonicalValue,
}

/// Everything an operator may consult.
pub struct VerifyContext<'a> {
    pub anchors: &'a AnchorSet,
    pub tools: &'a dyn ToolRunner,
    pub facts: &'a FactsStore,
    pub constraints: &'a ConstraintSet,
}

pub trait VerifyOperator: Send + Sync {
    fn id(&self) -> &str;

    /// Scripted operators may decide without evidence.
    fn scripted(&self) -> bool {
        false
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("duplicate operator id `{0}`")]
pub struct DuplicateOperatorError(pub String);

/// Operators consulted in insertion order.
#[derive(Default)]
pub struct OperatorRegistry {
    operators: Vec<Box<dyn VerifyOperator>>,
}

impl fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ids()).finish()
    }
}

impl OperatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        operator: Box<dyn VerifyOperator>,
    ) -> Result<&mut Self, DuplicateOperatorError> {
        if self.operators.iter().any(|o| o.id() == operator.id()) {
            return Err(DuplicateOperatorError(operator.id().to_string()));
        }
        self.operators.push(operator);
        Ok(self)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.operators.iter().map(|o| o.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Cheap checks first: unit, constraint, anchor, facts, then the
    /// scripted table, then cross-execution.
    pub fn standard(table: VerdictTable) -> Self {
        let mut reg = Self::new();
        reg.register(Box::new(UnitOperator)).expect("fresh registry");
        reg.register(Box::new(ConstraintOperator)).expect("fresh registry");
        reg.register(Box::new(AnchorOperator)).expect("fresh registry");
        reg.register(Box::new(FactsOperator)).expect("fresh registry");
        reg.register(Box::new(table)).expect("fresh registry");
        reg.register(Box::new(CrossExecutionOperator)).expect("fresh registry");
        reg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub verdict: Verdict,
    pub operator_errors: Vec<OperatorError>,
}

/// Runs operators in registry order until one supports or refutes.
///
/// A crashing operator counts as inconclusive; its error is returned for
/// logging.
pub fn verify(
    statement: &ContestedStatement,
    ctx: &VerifyContext<'_>,
    registry: &OperatorRegistry,
) -> VerifyOutcome {
    let mut cost = 0;
    let mut errors = Vec::new();
    for op in &registry.operators {
        cost += 1;
        match op.check(statement, ctx) {
            Ok(outcome) if outcome.value.is_decisive() => {
                return VerifyOutcome {
                    verdict: Verdict {
                        value: outcome.value,
                        evidence: outcome.evidence,
                        cost,
                        decided_by: Some(op.id().to_string()),
                        scripted: op.scripted(),
                    },
                    operator_errors: errors,
                };
            }
            Ok(_) => {}
            Err(e) => errors.push(e),
        }
    }
    VerifyOutcome {
        verdict: Verdict {
            value: VerdictValue::Inconclusive,
            evidence: Vec::new(),
            cost,
            decided_by: None,
            scripted: false,
        },
        operator_errors: errors,
    }
}

fn refute_on_failed_constraints(
    statement: &ContestedStatement,
    ctx: &VerifyContext<'_>,
    filter: impl Fn(&Constraint) -> bool,
) -> OperatorOutcome {
    let failed: Vec<EvidenceRef> = ctx
        .constraints
        .failing_for_step(&statement.step, &statement.value)
        .filter(|c| filter(c))
        .map(|c| EvidenceRef::Constraint(c.id.clone()))
        .collect();
    if failed.is_empty() {
        OperatorOutcome::inconclusive()
    } else {
        OperatorOutcome::refute(failed)
    }
}

/// Refutes values that break a unit constraint at their step.
#[derive(Debug, Clone, Copy)]
pub struct UnitOperator;

impl VerifyOperator for UnitOperator {
    fn id(&self) -> &str {
        "unit"
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        Ok(refute_on_failed_constraints(statement, ctx, |c| {
            c.kind == ConstraintKind::Unit
        }))
    }
}

/// Refutes values that break any non-unit step constraint.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintOperator;

impl VerifyOperator for ConstraintOperator {
    fn id(&self) -> &str {
        "constraint"
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        Ok(refute_on_failed_constraints(statement, ctx, |c| {
            c.kind != ConstraintKind::Unit
        }))
    }
}

/// Supports a value already anchored at its step. Never vetoes.
#[derive(Debug, Clone, Copy)]
pub struct AnchorOperator;

impl VerifyOperator for AnchorOperator {
    fn id(&self) -> &str {
        "anchor"
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        Ok(match ctx.anchors.get(&statement.step) {
            Some(v) if v.canonical_eq(&statement.value) => {
                OperatorOutcome::support(vec![EvidenceRef::Anchor(statement.step.clone())])
            }
            _ => OperatorOutcome::inconclusive(),
        })
    }
}

/// Compares against verified facts keyed by the step id.
#[derive(Debug, Clone, Copy)]
pub struct FactsOperator;

impl VerifyOperator for FactsOperator {
    fn id(&self) -> &str {
        "facts"
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        let key = statement.step.as_str();
        let report = ctx.facts.check_consistency(key, &statement.value);
        Ok(match report.verdict() {
            ConsistencyVerdict::Consistent => OperatorOutcome::support(
                ctx.facts
                    .verified_for(key)
                    .map(|f| EvidenceRef::Fact(f.id.clone()))
                    .collect(),
            ),
            ConsistencyVerdict::Conflict => OperatorOutcome::refute(
                report
                    .conflicting_fact_ids()
                    .iter()
                    .map(|id| EvidenceRef::Fact(id.clone()))
                    .collect(),
            ),
            ConsistencyVerdict::Unknown => OperatorOutcome::inconclusive(),
        })
    }
}

/// Re-runs tool records bound to the step (`params.step == <step id>`).
///
/// A record whose re-execution reproduces its outcome is trusted: the
/// statement is supported if it equals that outcome and refuted otherwise.
/// Records that fail to reproduce are ignored.
#[derive(Debug, Clone, Copy)]
pub struct CrossExecutionOperator;

impl VerifyOperator for CrossExecutionOperator {
    fn id(&self) -> &str {
        "cross_exec"
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        let step_value = CanonicalValue::text(statement.step.as_str());
        for record in ctx.facts.tools() {
            let bound = record
                .params
                .get("step")
                .is_some_and(|s| s.canonical_eq(&step_value));
            if !bound {
                continue;
            }
            let rerun = match ctx.tools.run(&record.tool_name, &record.params) {
                Ok(v) => v,
                Err(_) => continue,
            };
            if !rerun.canonical_eq(&record.outcome) {
                continue;
            }
            let evidence = vec![EvidenceRef::Tool(record.id.clone())];
            return Ok(if rerun.canonical_eq(&statement.value) {
                OperatorOutcome::support(evidence)
            } else {
                OperatorOutcome::refute(evidence)
            });
        }
        Ok(OperatorOutcome::inconclusive())
    }
}

/// Fixed `(step, value) → verdict` answers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerdictTable {
    entries: Vec<(StepId, CanonicalValue, VerdictValue)>,
}

impl VerdictTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: StepId, value: CanonicalValue, verdict: VerdictValue) {
        self.entries.push((step, value, verdict));
    }

    pub fn with(mut self, step: impl Into<StepId>, value: impl Into<CanonicalValue>, v: VerdictValue) -> Self {
        self.insert(step.into(), value.into(), v);
        self
    }

    pub fn lookup(&self, step: &StepId, value: &CanonicalValue) -> Option<VerdictValue> {
        self.entries
            .iter()
            .find(|(s, v, _)| s == step && v.canonical_eq(value))
            .map(|(_, _, verdict)| *verdict)
    }

    pub fn entries(&self) -> &[(StepId, CanonicalValue, VerdictValue)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl VerifyOperator for VerdictTable {
    fn id(&self) -> &str {
        "scripted"
    }

    fn scripted(&self) -> bool {
        true
    }

    fn check(
        &self,
        statement: &ContestedStatement,
        _ctx: &VerifyContext<'_>,
    ) -> Result<OperatorOutcome, OperatorError> {
        Ok(match self.lookup(&statement.step, &statement.value) {
            Some(v) => OperatorOutcome {
                value: v,
                evidence: Vec::new(),
            },
            None => OperatorOutcome::inconclusive(),
        })
    }
}
