//! Property tests against brute-force oracles.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use metaverify::audit_log::{payload, AuditLog, Stage};
use metaverify::baselines::{majority_vote, pass_at_n, ScenarioOracle};
use metaverify::camv::{statements, RetainedTrace};
use metaverify::ensemble::{ExpertId, ExpertOutput};
use metaverify::facts::{
    synchronize, ConsistencyReport, DefaultSummarizer, FactCategory, FactsStore, ToolRecord,
};
use metaverify::plan_dag::{build_plan, DagError, PlanDag, StepResult};
use metaverify::verifier::{CheckSpec, ConstraintKind, ConstraintScope, ConstraintSet, ConstraintSpec};
use metaverify::{CanonicalValue, StepId};

fn step(i: usize) -> StepId {
    StepId::new(format!("s{i}"))
}

/// A DAG over `n` steps: edges only go from lower to higher index in a
/// shuffled labelling, so any edge subset is acyclic.
fn dag_strategy(max: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (1..=max).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let len = pairs.len();
        (
            Just(n),
            proptest::collection::vec(any::<bool>(), len),
            Just(pairs),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
            .prop_map(|(n, keep, pairs, perm)| {
                let edges = pairs
                    .into_iter()
                    .zip(keep)
                    .filter(|(_, k)| *k)
                    .map(|((a, b), _)| (perm[a], perm[b]))
                    .collect();
                (n, edges)
            })
    })
}

fn plan(n: usize, edges: &[(usize, usize)]) -> Result<PlanDag, DagError> {
    build_plan((0..n).map(step), edges.iter().map(|&(a, b)| (step(a), step(b))))
}

/// reach[i][j]: j is reachable from i by one or more edges.
fn reachability(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for &(a, b) in edges {
        r[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if r[i][k] && r[k][j] {
                    r[i][j] = true;
                }
            }
        }
    }
    r
}

fn permutations(items: Vec<StepId>) -> Vec<Vec<StepId>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.clone();
        let head = rest.remove(i);
        for mut p in permutations(rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

proptest! {
    #[test]
    fn topological_order_is_smallest_valid_permutation((n, edges) in dag_strategy(6)) {
        let dag = plan(n, &edges).unwrap();
        let valid = |order: &[StepId]| {
            let pos: BTreeMap<&StepId, usize> = order.iter().enumerate().map(|(i, s)| (s, i)).collect();
            edges.iter().all(|&(a, b)| pos[&step(a)] < pos[&step(b)])
        };
        let steps: Vec<StepId> = (0..n).map(step).collect();
        let smallest = permutations(steps).into_iter().filter(|p| valid(p)).min().unwrap();
        prop_assert_eq!(dag.topological_order(), smallest.as_slice());
    }

    #[test]
    fn back_edge_is_a_cycle((n, edges) in dag_strategy(7)) {
        let reach = reachability(n, &edges);
        if let Some((a, b)) = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).find(|&(a, b)| reach[a][b]) {
            let mut cyclic = edges.clone();
            cyclic.push((b, a));
            prop_assert!(matches!(plan(n, &cyclic), Err(DagError::Cycle(_))));
        }
    }

    #[test]
    fn dependents_closure_matches_reachability((n, edges) in dag_strategy(8)) {
        let dag = plan(n, &edges).unwrap();
        let reach = reachability(n, &edges);
        for (i, row) in reach.iter().enumerate() {
            let expect: BTreeSet<StepId> = (0..n).filter(|&j| row[j]).map(step).collect();
            prop_assert_eq!(dag.dependents_closure(&step(i)).unwrap(), expect);
        }
    }

    #[test]
    fn backtrack_removes_violations_and_descendants(
        (n, edges) in dag_strategy(8),
        violated_mask in proptest::collection::vec(any::<bool>(), 8),
        present_mask in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let dag = plan(n, &edges).unwrap();
        let reach = reachability(n, &edges);
        let violated: BTreeSet<StepId> = (0..n).filter(|&i| violated_mask[i]).map(step).collect();
        let results: BTreeMap<StepId, StepResult> = (0..n)
            .filter(|&i| present_mask[i])
            .map(|i| (step(i), StepResult::new(i as f64, 0.5)))
            .collect();
        let bt = dag.eba_backtrack(&results, &violated).unwrap();
        let expect_removed: BTreeSet<StepId> = (0..n)
            .filter(|&j| violated_mask[j] || (0..n).any(|i| violated_mask[i] && reach[i][j]))
            .map(step)
            .collect();
        prop_assert_eq!(&bt.removed, &expect_removed);
        let expect_kept: BTreeSet<&StepId> = results.keys().filter(|s| !expect_removed.contains(*s)).collect();
        prop_assert_eq!(bt.retained.keys().collect::<BTreeSet<_>>(), expect_kept);
    }

    #[test]
    fn response_check_is_conjunction(
        bounds in proptest::collection::vec((-50i32..50, 0i32..50), 0..5),
        response in -100i32..100,
    ) {
        let specs: Vec<ConstraintSpec> = bounds
            .iter()
            .enumerate()
            .map(|(i, &(lo, width))| ConstraintSpec {
                id: format!("c{i}"),
                kind: ConstraintKind::Invariant,
                scope: ConstraintScope::Response,
                check: CheckSpec::Range { min: Some(lo as f64), max: Some((lo + width) as f64) },
                description: String::new(),
            })
            .collect();
        let set = ConstraintSet::from_specs(&specs).unwrap();
        let expect = bounds.iter().all(|&(lo, w)| lo <= response && response <= lo + w);
        prop_assert_eq!(set.check_response(&(response as f64).into()), expect);
    }

    #[test]
    fn majority_vote_picks_earliest_modal_value(xs in proptest::collection::vec(0i64..4, 1..12)) {
        let values: Vec<CanonicalValue> = xs.iter().map(|&x| x.into()).collect();
        let count = |x: i64| xs.iter().filter(|&&y| y == x).count();
        let top = xs.iter().map(|&x| count(x)).max().unwrap();
        let expect = *xs.iter().find(|&&x| count(x) == top).unwrap();
        prop_assert_eq!(majority_vote(&values).unwrap(), CanonicalValue::from(expect));
    }

    #[test]
    fn pass_at_n_is_membership(xs in proptest::collection::vec(0i64..6, 0..8), truth in 0i64..6) {
        let values: Vec<CanonicalValue> = xs.iter().map(|&x| x.into()).collect();
        let oracle = ScenarioOracle { truth: BTreeMap::new(), answer: truth.into() };
        prop_assert_eq!(pass_at_n(&values, &oracle), xs.contains(&truth));
    }

    #[test]
    fn one_statement_per_intermediate(sizes in proptest::collection::vec(0usize..6, 1..5)) {
        let traces: Vec<RetainedTrace> = sizes
            .iter()
            .enumerate()
            .map(|(e, &k)| {
                let out = ExpertOutput {
                    expert_id: ExpertId::new(format!("e{e:03}")),
                    intermediates: (0..k).map(|i| (step(i), StepResult::new(i as f64, 0.5))).collect(),
                    analysis: String::new(),
                    response: 0i64.into(),
                };
                RetainedTrace::new(out, 0, 1.0)
            })
            .collect();
        let stmts = statements(&traces);
        prop_assert_eq!(stmts.len(), sizes.iter().sum::<usize>());
        for (e, &k) in sizes.iter().enumerate() {
            let id = ExpertId::new(format!("e{e:03}"));
            prop_assert_eq!(stmts.iter().filter(|s| s.expert_id == id).count(), k);
        }
    }

    #[test]
    fn canonical_equality_is_reflexive_and_symmetric(
        a in -1e6f64..1e6,
        b in -1e6f64..1e6,
        s in "[a-zA-Z ]{0,8}",
    ) {
        let (x, y) = (CanonicalValue::number(a), CanonicalValue::number(b));
        prop_assert!(x.canonical_eq(&x));
        prop_assert_eq!(x.canonical_eq(&y), y.canonical_eq(&x));
        prop_assert!(x.canonical_eq(&CanonicalValue::number(a + 1e-12)));
        let t = CanonicalValue::text(s.clone());
        let padded = format!("  {}  ", s.to_uppercase());
        prop_assert!(t.canonical_eq(&CanonicalValue::text(padded)));
        prop_assert!(!CanonicalValue::quantity(a, "m").canonical_eq(&CanonicalValue::quantity(a, "s")));
    }

    #[test]
    fn audit_log_round_trips(events in proptest::collection::vec(("[a-z_]{1,10}", -1e9f64..1e9), 0..20)) {
        let mut log = AuditLog::new();
        for (name, x) in &events {
            log.append(Stage::Audit, name, payload([("x", serde_json::json!(x))]), vec![format!("step:{name}")]);
        }
        let text = log.to_lines();
        let back = AuditLog::from_lines(&text).unwrap();
        prop_assert_eq!(back.to_lines(), text);
        prop_assert_eq!(back.len(), events.len());
    }
}

/// Builds a store from (tool outcome, key, value, consistent?) ops.
fn store_from(tag: &str, ops: &[(i64, u8, i64, bool)]) -> FactsStore {
    let mut store = FactsStore::new();
    for (i, &(outcome, key, value, consistent)) in ops.iter().enumerate() {
        let id = format!("{tag}{i}");
        store
            .record_tool(ToolRecord {
                id: id.clone(),
                tool_name: "lookup".into(),
                params: BTreeMap::new(),
                outcome: outcome.into(),
                source_meta: None,
            })
            .unwrap();
        let note = store.summarize_to_note(&[id], &DefaultSummarizer).unwrap();
        let report = if consistent {
            ConsistencyReport::consistent()
        } else {
            ConsistencyReport::unknown()
        };
        store
            .promote_fact(&note.id, FactCategory::Retrieved, format!("k{key}"), value.into(), &report)
            .unwrap();
    }
    store
}

fn ops_strategy() -> impl Strategy<Value = Vec<(i64, u8, i64, bool)>> {
    proptest::collection::vec((0i64..3, 0u8..3, 0i64..3, any::<bool>()), 0..6)
}

proptest! {
    #[test]
    fn synchronize_ignores_store_order(a in ops_strategy(), b in ops_strategy(), c in ops_strategy()) {
        let stores = [store_from("a", &a), store_from("b", &b), store_from("c", &c)];
        let (m1, c1) = synchronize(&stores);
        let reversed = [stores[2].clone(), stores[0].clone(), stores[1].clone()];
        let (m2, c2) = synchronize(&reversed);
        prop_assert_eq!(m1.to_lines(), m2.to_lines());
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn store_lines_round_trip(a in ops_strategy()) {
        let store = store_from("t", &a);
        let text = store.to_lines();
        let back = FactsStore::from_lines(&text).unwrap();
        prop_assert_eq!(back.to_lines(), text);
        prop_assert_eq!(back.version(), store.version());
    }
}
