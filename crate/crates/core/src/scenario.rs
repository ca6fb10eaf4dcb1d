//! Scenario files: one scripted problem instance per JSON file.
//!
//! A scenario carries the plan DAG, constraints, scripted expert outputs,
//! verdict table, tool scripts, optional ground truth and seed facts, plus
//! optional per-scenario engine settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit_log::AuditLog;
use crate::baselines::ScenarioOracle;
use crate::camv::{run_camv, CamvConfig, CamvError, CamvInput, CamvOutput, SynthesisWeights};
use crate::ensemble::{ExpertClass, ExpertConfig, ExpertId, ExpertOutput, ScriptedBackend};
use crate::facts::{FactsStore, StoreRecord};
use crate::plan_dag::{build_plan, DagSpec, PlanDag, StepId, StepResult};
use crate::tools::{ScriptedTools, ToolScript};
use crate::value::CanonicalValue;
use crate::verifier::{ConstraintSet, ConstraintSpec, OperatorRegistry, VerdictTable, VerdictValue};

/// Separator between step id and JSON value in verdict-table keys.
pub const VERDICT_KEY_SEP: &str = "::";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedTrace {
    pub intermediates: BTreeMap<StepId, StepResult>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub analysis: String,
    pub response: CanonicalValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioExpert {
    pub id: ExpertId,
    pub class: ExpertClass,
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<ScriptedTrace>,
    /// Scripted backend failure instead of traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ScenarioExpert {
    pub fn outputs(&self) -> Vec<ExpertOutput> {
        self.traces
            .iter()
            .map(|t| ExpertOutput {
                expert_id: self.id.clone(),
                intermediates: t.intermediates.clone(),
                analysis: t.analysis.clone(),
                response: t.response.clone(),
            })
            .collect()
    }
}

/// Per-scenario overrides of engine defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<SynthesisWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traces_per_expert: Option<usize>,
}

impl ScenarioConfig {
    pub fn is_empty(&self) -> bool {
        *self == ScenarioConfig::default()
    }

    pub fn apply(&self, base: &CamvConfig) -> CamvConfig {
        CamvConfig {
            theta: self.theta.unwrap_or(base.theta),
            b_max: self.budget.or(base.b_max),
            gate_threshold: self.gate_threshold.unwrap_or(base.gate_threshold),
            weights: self.weights.unwrap_or(base.weights),
            seed: self.seed.unwrap_or(base.seed),
            use_facts: base.use_facts,
            traces_per_expert: self.traces_per_expert.unwrap_or(base.traces_per_expert),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub query: String,
    pub dag: DagSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintSpec>,
    pub experts: Vec<ScenarioExpert>,
    /// Keys are `"<step>::<json value>"`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub verdict_table: BTreeMap<String, VerdictValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_scripts: Vec<ToolScript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<ScenarioOracle>,
    /// Store records replayed into the initial facts store.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub facts_seed: Vec<StoreRecord>,
    #[serde(default, skip_serializing_if = "ScenarioConfig::is_empty")]
    pub config: ScenarioConfig,
    /// Free-form provenance, e.g. generator name and parameters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub fn verdict_key(step: &StepId, value: &CanonicalValue) -> String {
    format!("{step}{VERDICT_KEY_SEP}{}", value.to_json_string())
}

pub fn parse_verdict_key(key: &str) -> Option<(StepId, CanonicalValue)> {
    let (step, value) = key.split_once(VERDICT_KEY_SEP)?;
    let value = serde_json::from_str(value).ok()?;
    Some((StepId::new(step), value))
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario at `{key}`: {message}")]
    Validation { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        key: key.into(),
        message: message.into(),
    }
}

/// A validated scenario with its engine-side pieces built.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub dag: PlanDag,
    pub constraints: ConstraintSet,
    pub experts: Vec<ExpertConfig>,
    pub backend: ScriptedBackend,
    pub verdicts: VerdictTable,
    pub tools: ScriptedTools,
    pub facts: FactsStore,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn validate(self) -> Result<Scenario, ScenarioError> {
        let dag = build_plan(self.dag.steps.clone(), self.dag.edges.clone())
            .map_err(|e| invalid("dag", e.to_string()))?;

        let mut constraints = ConstraintSet::new();
        for (i, spec) in self.constraints.iter().enumerate() {
            let key = format!("constraints[{i}]");
            let c = spec.compile().map_err(|e| invalid(&key, e.to_string()))?;
            constraints.push(c).map_err(|e| invalid(&key, e.to_string()))?;
        }

        if self.experts.is_empty() {
            return Err(invalid("experts", "at least one expert required"));
        }
        let mut seen = BTreeSet::new();
        let mut backend = ScriptedBackend::new();
        let mut experts = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            let key = format!("experts[{i}]");
            if !seen.insert(e.id.clone()) {
                return Err(invalid(key, format!("duplicate expert id `{}`", e.id)));
            }
            match (&e.failure, e.traces.is_empty()) {
                (Some(_), false) => return Err(invalid(key, "both traces and failure given")),
                (None, true) => return Err(invalid(key, "no traces")),
                _ => {}
            }
            if !e.temperature.is_finite() || e.temperature < 0.0 {
                return Err(invalid(format!("{key}.temperature"), "must be finite and >= 0"));
            }
            for (j, t) in e.traces.iter().enumerate() {
                for step in t.intermediates.keys() {
                    if !dag.steps().contains(step) {
                        return Err(invalid(
                            format!("{key}.traces[{j}].intermediates.{step}"),
                            "unknown step",
                        ));
                    }
                }
                let out = ExpertOutput {
                    expert_id: e.id.clone(),
                    intermediates: t.intermediates.clone(),
                    analysis: t.analysis.clone(),
                    response: t.response.clone(),
                };
                out.validate()
                    .map_err(|err| invalid(format!("{key}.traces[{j}]"), err.to_string()))?;
            }
            match &e.failure {
                Some(msg) => backend = backend.with_failure(e.id.clone(), msg.clone()),
                None => backend = backend.with_traces(e.id.clone(), e.outputs()),
            }
            experts.push(ExpertConfig {
                expert_id: e.id.clone(),
                class: e.class,
                temperature: e.temperature,
                seed: e.seed,
            });
        }

        let mut verdicts = VerdictTable::new();
        for (key, verdict) in &self.verdict_table {
            let (step, value) = parse_verdict_key(key).ok_or_else(|| {
                invalid(
                    format!("verdict_table.{key}"),
                    "expected `<step>::<json value>`",
                )
            })?;
            if !dag.steps().contains(&step) {
                return Err(invalid(format!("verdict_table.{key}"), "unknown step"));
            }
            verdicts.insert(step, value, *verdict);
        }

        if let Some(oracle) = &self.oracle {
            for step in oracle.truth.keys() {
                if !dag.steps().contains(step) {
                    return Err(invalid(format!("oracle.truth.{step}"), "unknown step"));
                }
            }
        }

        let facts = FactsStore::from_records(self.facts_seed.iter().cloned())
            .map_err(|e| invalid("facts_seed", e.to_string()))?;
        let tools = ScriptedTools::from_scripts(&self.tool_scripts);

        let cfg = self.config.apply(&CamvConfig::default());
        cfg.validate().map_err(|e| invalid("config", e.to_string()))?;

        Ok(Scenario {
            file: self,
            dag,
            constraints,
            experts,
            backend,
            verdicts,
            tools,
            facts,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioFile::from_json(&text)?.validate()
}

pub fn save_scenario(path: &Path, file: &ScenarioFile) -> Result<(), ScenarioError> {
    fs::write(path, file.to_json()).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Scenario {
    pub fn id(&self) -> &str {
        self.file
            .meta
            .get("id")
            .and_then(|v| v.as_str())
            .unwrap_or("")
    }

    pub fn oracle(&self) -> Option<&ScenarioOracle> {
        self.file.oracle.as_ref()
    }

    /// Engine defaults with this scenario's overrides applied.
    pub fn config(&self, base: &CamvConfig) -> CamvConfig {
        self.file.config.apply(base)
    }

    pub fn registry(&self) -> OperatorRegistry {
        OperatorRegistry::standard(self.verdicts.clone())
    }

    /// Every scripted output of non-failing experts, in expert-id order,
    /// truncated to `traces_per_expert` traces each.
    pub fn outputs(&self, traces_per_expert: usize) -> Vec<ExpertOutput> {
        let mut experts: Vec<&ScenarioExpert> =
            self.file.experts.iter().filter(|e| e.failure.is_none()).collect();
        experts.sort_by(|a, b| a.id.cmp(&b.id));
        experts
            .into_iter()
            .flat_map(|e| e.outputs().into_iter().take(traces_per_expert.max(1)))
            .collect()
    }

    pub fn run(&self, config: &CamvConfig, log: &mut AuditLog) -> Result<CamvOutput, CamvError> {
        let registry = self.registry();
        let input = CamvInput {
            query: &self.file.query,
            dag: &self.dag,
            constraints: &self.constraints,
            experts: &self.experts,
            backend: &self.backend,
            operators: &registry,
            tools: &self.tools,
            facts: &self.facts,
        };
        run_camv(&input, config, log)
    }
}
