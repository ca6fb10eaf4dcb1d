//! Task decomposition graph shared by the experts of one scenario.
//!
//! A [`PlanDag`] is validated on construction (no cycles, no dangling edges)
//! and immutable afterwards. The topological order is the lexicographically
//! least one, so every consumer sees the same order across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::CanonicalValue;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepId(String);

impl StepId {
    pub fn new(id: impl Into<String>) -> Self {
        StepId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StepId {
    fn from(s: &str) -> Self {
        StepId(s.to_string())
    }
}

/// One expert's intermediate result at a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub value: CanonicalValue,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl StepResult {
    pub fn new(value: impl Into<CanonicalValue>, confidence: f64) -> Self {
        StepResult {
            value: value.into(),
            confidence,
            provenance: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DagError {
    #[error("plan graph contains a cycle through step `{0}`")]
    Cycle(StepId),
    #[error("unknown step `{0}`")]
    UnknownStep(StepId),
    #[error("duplicate step `{0}`")]
    DuplicateStep(StepId),
}

/// Wire form: `{"steps": [..], "edges": [[from, to], ..]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DagSpec {
    #[serde(default)]
    pub steps: Vec<StepId>,
    #[serde(default)]
    pub edges: Vec<(StepId, StepId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DagSpec", into = "DagSpec")]
pub struct PlanDag {
    steps: BTreeSet<StepId>,
    edges: BTreeSet<(StepId, StepId)>,
    children: BTreeMap<StepId, BTreeSet<StepId>>,
    order: Vec<StepId>,
}

impl TryFrom<DagSpec> for PlanDag {
    type Error = DagError;

    fn try_from(spec: DagSpec) -> Result<Self, Self::Error> {
        build_plan(spec.steps, spec.edges)
    }
}

impl From<PlanDag> for DagSpec {
    fn from(dag: PlanDag) -> Self {
        DagSpec {
            steps: dag.steps.into_iter().collect(),
            edges: dag.edges.into_iter().collect(),
        }
    }
}

/// Validates and builds a plan. Edges run dependency → dependent.
pub fn build_plan(
    steps: impl IntoIterator<Item = StepId>,
    edges: impl IntoIterator<Item = (StepId, StepId)>,
) -> Result<PlanDag, DagError> {
    let mut step_set = BTreeSet::new();
    for s in steps {
        if !step_set.insert(s.clone()) {
            return Err(DagError::DuplicateStep(s));
        }
    }
    let mut edge_set = BTreeSet::new();
    let mut children: BTreeMap<StepId, BTreeSet<StepId>> =
        step_set.iter().map(|s| (s.clone(), BTreeSet::new())).collect();
    for (from, to) in edges {
        for end in [&from, &to] {
            if !step_set.contains(end) {
                return Err(DagError::UnknownStep(end.clone()));
            }
        }
        if from == to {
            return Err(DagError::Cycle(from));
        }
        children.get_mut(&from).expect("checked above").insert(to.clone());
        edge_set.insert((from, to));
    }

    // Kahn's algorithm, always releasing the smallest ready id.
    let mut indegree: BTreeMap<&StepId, usize> = step_set.iter().map(|s| (s, 0)).collect();
    for (_, to) in &edge_set {
        *indegree.get_mut(to).expect("checked above") += 1;
    }
    let mut ready: BTreeSet<&StepId> =
        indegree.iter().filter(|(_, d)| **d == 0).map(|(s, _)| *s).collect();
    let mut order = Vec::with_capacity(step_set.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.clone());
        for child in &children[next] {
            let d = indegree.get_mut(child).expect("child is a step");
            *d -= 1;
            if *d == 0 {
                ready.insert(child);
            }
        }
    }
    if order.len() != step_set.len() {
        let stuck = indegree
            .iter()
            .find(|(_, d)| **d > 0)
            .map(|(s, _)| (*s).clone())
            .expect("a cycle leaves some step with positive indegree");
        return Err(DagError::Cycle(stuck));
    }

    Ok(PlanDag {
        steps: step_set,
        edges: edge_set,
        children,
        order,
    })
}

/// Steps kept and dropped by an elimination-by-aspects backtrack.
#[derive(Debug, Clone, PartialEq)]
pub struct Backtrack {
    pub retained: BTreeMap<StepId, StepResult>,
    pub removed: BTreeSet<StepId>,
}

impl PlanDag {
    pub fn empty() -> Self {
        build_plan(Vec::new(), Vec::new()).expect("empty plan is valid")
    }

    pub fn steps(&self) -> &BTreeSet<StepId> {
        &self.steps
    }

    pub fn edges(&self) -> &BTreeSet<(StepId, StepId)> {
        &self.edges
    }

    pub fn contains(&self, step: &StepId) -> bool {
        self.steps.contains(step)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Direct dependents of `step`.
    pub fn children(&self, step: &StepId) -> Option<&BTreeSet<StepId>> {
        self.children.get(step)
    }

    /// Every dependency precedes its dependents; ties go to the smaller id.
    pub fn topological_order(&self) -> &[StepId] {
        &self.order
    }

    /// All steps reachable from `step`, excluding `step` itself.
    pub fn dependents_closure(&self, step: &StepId) -> Result<BTreeSet<StepId>, DagError> {
        let direct = self
            .children
            .get(step)
            .ok_or_else(|| DagError::UnknownStep(step.clone()))?;
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&StepId> = direct.iter().collect();
        while let Some(s) = stack.pop() {
            if seen.insert(s.clone()) {
                stack.extend(self.children[s].iter());
            }
        }
        Ok(seen)
    }

    /// Removes each violated step plus everything downstream of it.
    ///
    /// Results at surviving steps are passed through untouched. Re-executing
    /// the removed sub-chains is left to the caller.
    pub fn eba_backtrack(
        &self,
        results: &BTreeMap<StepId, StepResult>,
        violated: &BTreeSet<StepId>,
    ) -> Result<Backtrack, DagError> {
        let mut removed = BTreeSet::new();
        for v in violated {
            let closure = self.dependents_closure(v)?;
            removed.insert(v.clone());
            removed.extend(closure);
        }
        let retained = results
            .iter()
            .filter(|(s, _)| !removed.contains(*s))
            .map(|(s, r)| (s.clone(), r.clone()))
            .collect();
        Ok(Backtrack { retained, removed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> Vec<StepId> {
        xs.iter().map(|s| StepId::from(*s)).collect()
    }

    fn edges(xs: &[(&str, &str)]) -> Vec<(StepId, StepId)> {
        xs.iter().map(|(a, b)| (StepId::from(*a), StepId::from(*b))).collect()
    }

    fn diamond() -> PlanDag {
        build_plan(
            ids(&["a", "b", "c", "d"]),
            edges(&[("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]),
        )
        .unwrap()
    }

    #[test]
    fn chain_orders_forced() {
        let dag = build_plan(ids(&["a", "b", "c"]), edges(&[("a", "b"), ("b", "c")])).unwrap();
        assert_eq!(dag.topological_order(), ids(&["a", "b", "c"]).as_slice());
    }

    #[test]
    fn self_loop_is_cycle() {
        let err = build_plan(ids(&["a"]), edges(&[("a", "a")])).unwrap_err();
        assert_eq!(err, DagError::Cycle("a".into()));
    }

    #[test]
    fn longer_cycle_rejected() {
        let err = build_plan(
            ids(&["a", "b", "c"]),
            edges(&[("a", "b"), ("b", "c"), ("c", "a")]),
        )
        .unwrap_err();
        assert!(matches!(err, DagError::Cycle(_)));
    }

    #[test]
    fn dangling_edge_rejected() {
        let err = build_plan(ids(&["a"]), edges(&[("a", "z")])).unwrap_err();
        assert_eq!(err, DagError::UnknownStep("z".into()));
    }

    #[test]
    fn duplicate_step_rejected() {
        let err = build_plan(ids(&["a", "a"]), Vec::new()).unwrap_err();
        assert_eq!(err, DagError::DuplicateStep("a".into()));
    }

    #[test]
    fn diamond_order_breaks_ties_by_id() {
        assert_eq!(diamond().topological_order(), ids(&["a", "b", "c", "d"]).as_slice());
    }

    #[test]
    fn unconnected_steps_follow_id_order() {
        let dag = build_plan(ids(&["c", "a", "b"]), Vec::new()).unwrap();
        assert_eq!(dag.topological_order(), ids(&["a", "b", "c"]).as_slice());
    }

    #[test]
    fn empty_plan_is_legal() {
        let dag = PlanDag::empty();
        assert!(dag.is_empty());
        assert!(dag.topological_order().is_empty());
    }

    #[test]
    fn closure_of_root_and_sink() {
        let dag = diamond();
        let all: BTreeSet<StepId> = ids(&["b", "c", "d"]).into_iter().collect();
        assert_eq!(dag.dependents_closure(&"a".into()).unwrap(), all);
        assert!(dag.dependents_closure(&"d".into()).unwrap().is_empty());
        assert_eq!(
            dag.dependents_closure(&"zz".into()).unwrap_err(),
            DagError::UnknownStep("zz".into())
        );
    }

    fn results(dag: &PlanDag) -> BTreeMap<StepId, StepResult> {
        dag.steps()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), StepResult::new(i as f64, 0.5)))
            .collect()
    }

    #[test]
    fn eba_empty_violation_keeps_everything() {
        let dag = diamond();
        let res = results(&dag);
        let out = dag.eba_backtrack(&res, &BTreeSet::new()).unwrap();
        assert!(out.removed.is_empty());
        assert_eq!(out.retained, res);
    }

    #[test]
    fn eba_chain_removes_downstream() {
        let dag = build_plan(ids(&["a", "b", "c"]), edges(&[("a", "b"), ("b", "c")])).unwrap();
        let res = results(&dag);
        let violated = [StepId::from("b")].into_iter().collect();
        let out = dag.eba_backtrack(&res, &violated).unwrap();
        assert_eq!(out.removed, ids(&["b", "c"]).into_iter().collect());
        assert_eq!(out.retained.keys().cloned().collect::<Vec<_>>(), ids(&["a"]));
        assert_eq!(out.retained[&StepId::from("a")], res[&StepId::from("a")]);
    }

    #[test]
    fn eba_diamond_spares_sibling() {
        let dag = diamond();
        let res = results(&dag);
        let violated = [StepId::from("b")].into_iter().collect();
        let out = dag.eba_backtrack(&res, &violated).unwrap();
        assert_eq!(out.removed, ids(&["b", "d"]).into_iter().collect());
        assert_eq!(out.retained.keys().cloned().collect::<Vec<_>>(), ids(&["a", "c"]));
    }

    #[test]
    fn eba_unknown_violation_errors() {
        let dag = diamond();
        let violated = [StepId::from("q")].into_iter().collect();
        assert!(dag.eba_backtrack(&BTreeMap::new(), &violated).is_err());
    }

    #[test]
    fn serde_round_trip_validates() {
        let dag = diamond();
        let json = serde_json::to_string(&dag).unwrap();
        let back: PlanDag = serde_json::from_str(&json).unwrap();
        assert_eq!(back, dag);
        let bad = r#"{"steps": ["a"], "edges": [["a", "a"]]}"#;
        assert!(serde_json::from_str::<PlanDag>(bad).is_err());
    }
}
