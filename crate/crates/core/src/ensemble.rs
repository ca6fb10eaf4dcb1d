//! Expert ensembles: conservative/radical configuration, pluggable backends,
//! and collection of each expert's output tuple.

use std::collections::BTreeMap;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit_log::{payload, AuditLog, Stage};
use crate::plan_dag::{StepId, StepResult};
use crate::value::CanonicalValue;

pub const CONSERVATIVE_TEMPERATURE: f64 = 0.1;
pub const RADICAL_TEMPERATURE_MIN: f64 = 0.7;
pub const RADICAL_TEMPERATURE_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(String);

impl ExpertId {
    pub fn new(id: impl Into<String>) -> Self {
        ExpertId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ExpertId {
    fn from(s: &str) -> Self {
        ExpertId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertClass {
    Conservative,
    Radical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub expert_id: ExpertId,
    pub class: ExpertClass,
    pub temperature: f64,
    pub seed: u64,
}

/// One expert's answer: intermediates with confidences, an overall
/// analysis, and the final response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert_id: ExpertId,
    pub intermediates: BTreeMap<StepId, StepResult>,
    #[serde(default)]
    pub analysis: String,
    pub response: CanonicalValue,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("confidence {confidence} at step `{step}` outside [0, 1]")]
    Confidence { step: StepId, confidence: f64 },
    #[error("non-finite number in {0}")]
    NonFinite(String),
    #[error("expected output for `{expected}`, backend answered as `{got}`")]
    WrongExpert { expected: ExpertId, got: ExpertId },
    #[error("malformed backend reply: {0}")]
    Malformed(String),
}

impl ExpertOutput {
    /// Confidence per step; keys always coincide with `intermediates`.
    pub fn confidences(&self) -> BTreeMap<StepId, f64> {
        self.intermediates
            .iter()
            .map(|(s, r)| (s.clone(), r.confidence))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        for (step, r) in &self.intermediates {
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(SchemaError::Confidence {
                    step: step.clone(),
                    confidence: r.confidence,
                });
            }
            if !r.value.is_finite() {
                return Err(SchemaError::NonFinite(format!("step `{step}`")));
            }
        }
        if !self.response.is_finite() {
            return Err(SchemaError::NonFinite("response".into()));
        }
        Ok(())
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.intermediates.is_empty() {
            return 0.0;
        }
        self.intermediates.values().map(|r| r.confidence).sum::<f64>()
            / self.intermediates.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePlan {
    pub n_experts: usize,
    pub conservative_fraction: f64,
    /// Per-expert temperatures by index; empty selects the default schedule.
    #[serde(default)]
    pub temperature_schedule: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid ensemble plan: {0}")]
pub struct InvalidPlanError(pub String);

impl EnsemblePlan {
    pub fn new(n_experts: usize, conservative_fraction: f64) -> Self {
        EnsemblePlan {
            n_experts,
            conservative_fraction,
            temperature_schedule: Vec::new(),
        }
    }

    /// `ceil(fraction × n)`, robust to float noise; singletons are conservative.
    pub fn conservative_count(&self) -> usize {
        if self.n_experts == 1 {
            return 1;
        }
        let raw = self.conservative_fraction * self.n_experts as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.n_experts)
    }
}

pub fn expert_id_for(index: usize) -> ExpertId {
    ExpertId(format!("e{:03}", index + 1))
}

/// Expands a plan into expert configurations.
///
/// The first `conservative_count()` experts are conservative. Seeds come from
/// a ChaCha stream keyed by `master_seed`, one draw per expert.
pub fn make_ensemble(
    plan: &EnsemblePlan,
    master_seed: u64,
) -> Result<Vec<ExpertConfig>, InvalidPlanError> {
    let n = plan.n_experts;
    if n == 0 {
        return Err(InvalidPlanError("n_experts must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&plan.conservative_fraction) {
        return Err(InvalidPlanError(format!(
            "conservative_fraction {} outside [0, 1]",
            plan.conservative_fraction
        )));
    }
    let n_cons = plan.conservative_count();
    if n >= 2 && n_cons == 0 {
        return Err(InvalidPlanError(
            "ensembles of two or more need at least one conservative expert".into(),
        ));
    }

    let temps: Vec<f64> = if plan.temperature_schedule.is_empty() {
        let n_rad = n - n_cons;
        (0..n)
            .map(|i| {
                if i < n_cons {
                    CONSERVATIVE_TEMPERATURE
                } else if n_rad == 1 {
                    RADICAL_TEMPERATURE_MIN
                } else {
                    let j = (i - n_cons) as f64 / (n_rad - 1) as f64;
                    RADICAL_TEMPERATURE_MIN + j * (RADICAL_TEMPERATURE_MAX - RADICAL_TEMPERATURE_MIN)
                }
            })
            .collect()
    } else {
        if plan.temperature_schedule.len() != n {
            return Err(InvalidPlanError(format!(
                "temperature schedule has {} entries for {n} experts",
                plan.temperature_schedule.len()
            )));
        }
        plan.temperature_schedule.clone()
    };
    if let Some(t) = temps.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(InvalidPlanError(format!("temperature {t} must be finite and >= 0")));
    }
    let max_cons = temps[..n_cons].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_rad = temps[n_cons..].iter().cloned().fold(f64::INFINITY, f64::min);
    if max_cons > min_rad {
        return Err(InvalidPlanError(format!(
            "conservative temperature {max_cons} exceeds radical minimum {min_rad}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    Ok((0..n)
        .map(|i| ExpertConfig {
            expert_id: expert_id_for(i),
            class: if i < n_cons {
                ExpertClass::Conservative
            } else {
                ExpertClass::Radical
            },
            temperature: temps[i],
            seed: rng.next_u64(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("no script for expert `{0}`")]
    UnknownExpert(ExpertId),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("backend returned no traces")]
    Empty,
}

/// Source of expert traces. Implementations must tolerate concurrent calls.
pub trait ExpertBackend: Send + Sync {
    fn sample_traces(
        &self,
        config: &ExpertConfig,
        query: &str,
    ) -> Result<Vec<ExpertOutput>, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedReply {
    Traces(Vec<ExpertOutput>),
    Failure(String),
}

/// Replays fixed outputs per expert id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    scripts: BTreeMap<ExpertId, ScriptedReply>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_traces(mut self, expert: impl Into<ExpertId>, traces: Vec<ExpertOutput>) -> Self {
        self.scripts.insert(expert.into(), ScriptedReply::Traces(traces));
        self
    }

    pub fn with_failure(mut self, expert: impl Into<ExpertId>, message: impl Into<String>) -> Self {
        self.scripts
            .insert(expert.into(), ScriptedReply::Failure(message.into()));
        self
    }

    pub fn insert(&mut self, expert: ExpertId, reply: ScriptedReply) {
        self.scripts.insert(expert, reply);
    }
}

impl From<String> for ExpertId {
    fn from(s: String) -> Self {
        ExpertId(s)
    }
}

impl ExpertBackend for ScriptedBackend {
    fn sample_traces(
        &self,
        config: &ExpertConfig,
        _query: &str,
    ) -> Result<Vec<ExpertOutput>, BackendError> {
        match self.scripts.get(&config.expert_id) {
            Some(ScriptedReply::Traces(t)) => Ok(t.clone()),
            Some(ScriptedReply::Failure(msg)) => Err(BackendError::Transport(msg.clone())),
            None => Err(BackendError::UnknownExpert(config.expert_id.clone())),
        }
    }
}

/// Samples and validates traces for one expert, keeping at most `max_traces`.
pub fn sample_traces(
    config: &ExpertConfig,
    query: &str,
    backend: &dyn ExpertBackend,
    max_traces: usize,
) -> Result<Vec<ExpertOutput>, BackendError> {
    let mut traces = backend.sample_traces(config, query)?;
    if traces.is_empty() {
        return Err(BackendError::Empty);
    }
    traces.truncate(max_traces.max(1));
    for t in &traces {
        if t.expert_id != config.expert_id {
            return Err(SchemaError::WrongExpert {
                expected: config.expert_id.clone(),
                got: t.expert_id.clone(),
            }
            .into());
        }
        t.validate()?;
    }
    Ok(traces)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("all {0} experts failed")]
pub struct AllExpertsFailedError(pub usize);

/// Fans out to every expert and returns their traces ordered by expert id.
///
/// Failed experts are logged and skipped; the run fails only when none
/// succeed.
pub fn collect(
    query: &str,
    configs: &[ExpertConfig],
    backend: &dyn ExpertBackend,
    max_traces: usize,
    log: &mut AuditLog,
) -> Result<Vec<ExpertOutput>, AllExpertsFailedError> {
    let mut ordered: Vec<&ExpertConfig> = configs.iter().collect();
    ordered.sort_by(|a, b| a.expert_id.cmp(&b.expert_id));
    let results: Vec<_> = ordered
        .par_iter()
        .map(|c| sample_traces(c, query, backend, max_traces))
        .collect();

    let mut outputs = Vec::new();
    for (config, result) in ordered.iter().zip(results) {
        let expert_ref = format!("expert:{}", config.expert_id);
        match result {
            Ok(traces) => {
                for (i, t) in traces.iter().enumerate() {
                    log.append(
                        Stage::Ensemble,
                        "expert_output",
                        payload([
                            ("expert", json!(config.expert_id)),
                            ("class", json!(config.class)),
                            ("temperature", json!(config.temperature)),
                            ("trace", json!(i)),
                            ("steps", json!(t.intermediates.len())),
                            ("analysis", json!(t.analysis)),
                            ("response", json!(t.response)),
                        ]),
                        vec![expert_ref.clone()],
                    );
                }
                outputs.extend(traces);
            }
            Err(e) => {
                log.append(
                    Stage::Ensemble,
                    "expert_failed",
                    payload([
                        ("expert", json!(config.expert_id)),
                        ("error", json!(e.to_string())),
                    ]),
                    vec![expert_ref],
                );
            }
        }
    }
    if outputs.is_empty() {
        return Err(AllExpertsFailedError(configs.len()));
    }
    Ok(outputs)
}
