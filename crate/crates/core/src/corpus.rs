//! Seeded synthetic scenario generators and corpus directories.
//!
//! Every generated scenario records its generator name, parameters, seed and
//! index under `meta`, so a report can state exactly what it was run on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::ScenarioOracle;
use crate::ensemble::{expert_id_for, ExpertClass, CONSERVATIVE_TEMPERATURE};
use crate::facts::{DefaultSummarizer, FactCategory, FactsStore, ToolRecord};
use crate::plan_dag::{DagSpec, StepId, StepResult};
use crate::scenario::{
    load_scenario, save_scenario, verdict_key, Scenario, ScenarioConfig, ScenarioError,
    ScenarioExpert, ScenarioFile, ScriptedTrace,
};
use crate::tools::ToolScript;
use crate::value::CanonicalValue;
use crate::verifier::{
    CheckSpec, ConstraintKind, ConstraintScope, ConstraintSpec, VerdictValue,
};

/// Upper bound of the `[0, VALUE_RANGE]` constraint generated scenarios use.
pub const VALUE_RANGE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomParams {
    pub max_experts: usize,
    pub max_steps: usize,
    /// Probability an expert reports the true value at a step.
    pub agreement: f64,
    /// Number of distinct wrong values available per step.
    pub distractors: usize,
    /// Probability a verdict-table entry is correct.
    pub fidelity: f64,
    /// Probability a `(step, value)` pair has a verdict-table entry.
    pub coverage: f64,
    /// Probability an expert skips a non-final step.
    pub omit: f64,
    pub edge_prob: f64,
    pub constraint_prob: f64,
    pub fact_prob: f64,
    pub tool_prob: f64,
}

impl Default for RandomParams {
    fn default() -> Self {
        RandomParams {
            max_experts: 5,
            max_steps: 8,
            agreement: 0.6,
            distractors: 2,
            fidelity: 0.8,
            coverage: 0.7,
            omit: 0.1,
            edge_prob: 0.35,
            constraint_prob: 0.3,
            fact_prob: 0.1,
            tool_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialParams {
    /// Odd number of experts; a strict majority agrees on a wrong value.
    pub experts: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub majority_confidence: f64,
    pub minority_confidence: f64,
}

impl Default for AdversarialParams {
    fn default() -> Self {
        AdversarialParams {
            experts: 3,
            min_steps: 2,
            max_steps: 6,
            majority_confidence: 0.9,
            minority_confidence: 0.6,
        }
    }
}

fn rng_for(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn step_ids(k: usize) -> Vec<StepId> {
    (1..=k).map(|i| StepId::new(format!("s{i}"))).collect()
}

fn expert_class(i: usize, rng: &mut ChaCha8Rng) -> (ExpertClass, f64) {
    if i == 0 {
        (ExpertClass::Conservative, CONSERVATIVE_TEMPERATURE)
    } else {
        (ExpertClass::Radical, round2(rng.gen_range(0.7..=1.0)))
    }
}

fn meta(generator: &str, params: &impl Serialize, seed: u64, index: usize) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("generator".to_string(), json!(generator)),
        ("params".to_string(), json!(params)),
        ("seed".to_string(), json!(seed)),
        ("index".to_string(), json!(index)),
        ("id".to_string(), json!(format!("{generator}-{seed}-{index:04}"))),
    ])
}

/// A random scenario: up to `max_experts` experts over a random DAG of up to
/// `max_steps` steps, with noisy values, optional constraints, seed facts,
/// tool records and a partially faithful verdict table.
pub fn random_scenario(params: &RandomParams, seed: u64, index: usize) -> ScenarioFile {
    let mut rng = rng_for(seed, index);
    let n = rng.gen_range(1..=params.max_experts.max(1));
    let k = rng.gen_range(1..=params.max_steps.max(1));
    let steps = step_ids(k);
    let last = steps[k - 1].clone();

    let mut edges = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            if rng.gen_bool(params.edge_prob) {
                edges.push((steps[i].clone(), steps[j].clone()));
            }
        }
    }

    let truth: BTreeMap<StepId, f64> = steps
        .iter()
        .map(|s| (s.clone(), rng.gen_range(0..=99) as f64))
        .collect();

    let mut experts = Vec::new();
    for i in 0..n {
        let (class, temperature) = expert_class(i, &mut rng);
        let mut intermediates = BTreeMap::new();
        for s in &steps {
            if s != &last && rng.gen_bool(params.omit) {
                continue;
            }
            let value = if params.distractors == 0 || rng.gen_bool(params.agreement) {
                truth[s]
            } else {
                truth[s] + rng.gen_range(1..=params.distractors) as f64
            };
            let confidence = round2(rng.gen_range(0.3..=1.0));
            intermediates.insert(s.clone(), StepResult::new(value, confidence));
        }
        let response = intermediates[&last].value.clone();
        experts.push(ScenarioExpert {
            id: expert_id_for(i),
            class,
            temperature,
            seed: rng.gen(),
            traces: vec![ScriptedTrace {
                intermediates,
                analysis: String::new(),
                response,
            }],
            failure: None,
        });
    }

    let mut constraints = Vec::new();
    if rng.gen_bool(params.constraint_prob) {
        constraints.push(ConstraintSpec {
            id: "step_range".into(),
            kind: ConstraintKind::Invariant,
            scope: ConstraintScope::Step("s*".into()),
            check: CheckSpec::Range {
                min: Some(0.0),
                max: Some(VALUE_RANGE),
            },
            description: "step values lie in [0, 100]".into(),
        });
    }
    if rng.gen_bool(params.constraint_prob) {
        constraints.push(ConstraintSpec {
            id: "response_range".into(),
            kind: ConstraintKind::Schema,
            scope: ConstraintScope::Response,
            check: CheckSpec::Range {
                min: Some(0.0),
                max: Some(VALUE_RANGE),
            },
            description: "answer lies in [0, 100]".into(),
        });
    }

    let mut store = FactsStore::new();
    let mut tool_scripts = Vec::new();
    for s in &steps {
        let value = CanonicalValue::number(truth[s]);
        if rng.gen_bool(params.fact_prob) {
            store
                .assert_fact(FactCategory::Given, s.as_str(), value.clone())
                .expect("given facts need no provenance");
        }
        if rng.gen_bool(params.tool_prob) {
            let record = ToolRecord {
                id: format!("t_{s}"),
                tool_name: "lookup".into(),
                params: BTreeMap::from([("step".to_string(), CanonicalValue::text(s.as_str()))]),
                outcome: value.clone(),
                source_meta: None,
            };
            tool_scripts.push(ToolScript {
                tool: record.tool_name.clone(),
                params: record.params.clone(),
                outcome: value.clone(),
            });
            let tool_id = store.record_tool(record).expect("fresh tool id");
            let note = store
                .summarize_to_note(&[tool_id], &DefaultSummarizer)
                .expect("tool just recorded");
            let report = store.check_consistency(s.as_str(), &value);
            store
                .promote_fact(&note.id, FactCategory::Retrieved, s.as_str(), value, &report)
                .expect("note just created");
        }
    }

    let mut verdict_table = BTreeMap::new();
    for s in &steps {
        let mut seen: Vec<CanonicalValue> = Vec::new();
        for e in &experts {
            if let Some(r) = e.traces[0].intermediates.get(s) {
                if !seen.iter().any(|v| v.canonical_eq(&r.value)) {
                    seen.push(r.value.clone());
                }
            }
        }
        for v in seen {
            if !rng.gen_bool(params.coverage) {
                continue;
            }
            let correct = v.canonical_eq(&CanonicalValue::number(truth[s]));
            let faithful = rng.gen_bool(params.fidelity);
            let verdict = if rng.gen_bool(0.1) {
                VerdictValue::Inconclusive
            } else if correct == faithful {
                VerdictValue::Support
            } else {
                VerdictValue::Refute
            };
            verdict_table.insert(verdict_key(s, &v), verdict);
        }
    }

    let config = ScenarioConfig {
        theta: Some(rng.gen_range(2..=n.max(2))),
        budget: if rng.gen_bool(0.5) {
            Some(rng.gen_range(0..=4))
        } else {
            None
        },
        ..Default::default()
    };

    ScenarioFile {
        query: format!("random scenario {index}"),
        dag: DagSpec {
            steps: steps.clone(),
            edges,
        },
        constraints,
        experts,
        verdict_table,
        tool_scripts,
        oracle: Some(ScenarioOracle {
            truth: truth
                .iter()
                .map(|(s, v)| (s.clone(), CanonicalValue::number(*v)))
                .collect(),
            answer: CanonicalValue::number(truth[&last]),
        }),
        facts_seed: store.journal().to_vec(),
        config,
        meta: meta("random", params, seed, index),
    }
}

/// A chain where a strict majority of experts shares one wrong value from
/// some step onward and the minority keeps the true one. The verdict table
/// refutes the majority and supports the minority at the first contested
/// step; anchoring requires unanimity and the budget is 2.
pub fn adversarial_scenario(params: &AdversarialParams, seed: u64, index: usize) -> ScenarioFile {
    let mut rng = rng_for(seed, index);
    let n = params.experts.max(3);
    let majority = n / 2 + 1;
    let k = rng.gen_range(params.min_steps.max(1)..=params.max_steps.max(params.min_steps.max(1)));
    let steps = step_ids(k);
    let edges: Vec<(StepId, StepId)> = steps.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
    let split = rng.gen_range(0..k);

    let truth: Vec<f64> = (0..k).map(|_| rng.gen_range(0..=99) as f64).collect();
    let wrong: Vec<f64> = truth
        .iter()
        .map(|t| t + rng.gen_range(1..=50) as f64)
        .collect();

    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng);
    let majority_ids: Vec<usize> = ids[..majority].to_vec();

    let mut experts = Vec::new();
    for i in 0..n {
        let (class, temperature) = expert_class(i, &mut rng);
        let in_majority = majority_ids.contains(&i);
        let conf = if in_majority {
            params.majority_confidence
        } else {
            params.minority_confidence
        };
        let intermediates: BTreeMap<StepId, StepResult> = steps
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = if in_majority && j >= split { wrong[j] } else { truth[j] };
                (s.clone(), StepResult::new(v, conf))
            })
            .collect();
        let response = intermediates[&steps[k - 1]].value.clone();
        experts.push(ScenarioExpert {
            id: expert_id_for(i),
            class,
            temperature,
            seed: rng.gen(),
            traces: vec![ScriptedTrace {
                intermediates,
                analysis: String::new(),
                response,
            }],
            failure: None,
        });
    }

    let contested = &steps[split];
    let verdict_table = BTreeMap::from([
        (
            verdict_key(contested, &CanonicalValue::number(wrong[split])),
            VerdictValue::Refute,
        ),
        (
            verdict_key(contested, &CanonicalValue::number(truth[split])),
            VerdictValue::Support,
        ),
    ]);

    ScenarioFile {
        query: format!("adversarial scenario {index}"),
        dag: DagSpec {
            steps: steps.clone(),
            edges,
        },
        constraints: Vec::new(),
        experts,
        verdict_table,
        tool_scripts: Vec::new(),
        oracle: Some(ScenarioOracle {
            truth: steps
                .iter()
                .zip(&truth)
                .map(|(s, v)| (s.clone(), CanonicalValue::number(*v)))
                .collect(),
            answer: CanonicalValue::number(truth[k - 1]),
        }),
        facts_seed: Vec::new(),
        config: ScenarioConfig {
            theta: Some(n),
            budget: Some(2),
            ..Default::default()
        },
        meta: meta("adversarial", params, seed, index),
    }
}

/// Writes `scenario_0000.json`, `scenario_0001.json`, ... into `dir`.
pub fn write_corpus(dir: &Path, files: &[ScenarioFile]) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("scenario_{i:04}.json"));
            save_scenario(&path, f).map(|_| path)
        })
        .collect()
}

/// Loads every `*.json` file in `dir`, ordered by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<(String, Scenario)>, ScenarioError> {
    let io_err = |source| ScenarioError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            load_scenario(&p).map(|s| (name, s))
        })
        .collect()
}
