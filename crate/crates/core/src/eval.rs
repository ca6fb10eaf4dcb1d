//! Corpus evaluation of CAMV against the baselines, and component ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit_log::AuditLog;
use crate::baselines::{majority_vote, pass_at_n, simple_verification, HighestConfidence};
use crate::camv::CamvConfig;
use crate::ensemble::ExpertOutput;
use crate::scenario::Scenario;
use crate::value::CanonicalValue;
use crate::verifier::{gate, ConstraintSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Full pipeline with facts-consistency gating.
    #[serde(rename = "camv")]
    Camv,
    #[serde(rename = "mv")]
    Mv,
    #[serde(rename = "sv")]
    Sv,
    #[serde(rename = "passn")]
    PassN,
    /// First expert's response, by id.
    #[serde(rename = "baseline")]
    Baseline,
    /// First expert whose trace passes facts gating.
    #[serde(rename = "trsf")]
    Trsf,
    /// Simple verification over facts-gated traces.
    #[serde(rename = "sv+trsf")]
    SvTrsf,
    /// Full pipeline without facts-consistency gating.
    #[serde(rename = "camv-nofacts")]
    CamvNoFacts,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Camv,
        Method::Mv,
        Method::Sv,
        Method::PassN,
        Method::Baseline,
        Method::Trsf,
        Method::SvTrsf,
        Method::CamvNoFacts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Camv => "camv",
            Method::Mv => "mv",
            Method::Sv => "sv",
            Method::PassN => "passn",
            Method::Baseline => "baseline",
            Method::Trsf => "trsf",
            Method::SvTrsf => "sv+trsf",
            Method::CamvNoFacts => "camv-nofacts",
        }
    }

    fn runs_camv(self) -> bool {
        matches!(self, Method::Camv | Method::CamvNoFacts)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown method `{0}` (expected one of camv, mv, sv, passn, baseline, trsf, sv+trsf, camv-nofacts)")]
pub struct UnknownMethodError(pub String);

impl FromStr for Method {
    type Err = UnknownMethodError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| UnknownMethodError(s.to_string()))
    }
}

/// Which modules an ablation row enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub trsf: bool,
    pub sv: bool,
    pub camv: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no methods selected")]
    NoMethods,
    #[error("invalid ablation config: CAMV requires SV")]
    InvalidConfig(AblationConfig),
}

impl AblationConfig {
    /// The six configurations in reporting order.
    pub const TABLE: [AblationConfig; 6] = [
        AblationConfig::new(false, false, false),
        AblationConfig::new(false, true, false),
        AblationConfig::new(true, false, false),
        AblationConfig::new(false, true, true),
        AblationConfig::new(true, true, false),
        AblationConfig::new(true, true, true),
    ];

    pub const fn new(trsf: bool, sv: bool, camv: bool) -> Self {
        AblationConfig { trsf, sv, camv }
    }

    pub fn method(&self) -> Result<Method, EvalError> {
        Ok(match (self.trsf, self.sv, self.camv) {
            (_, false, true) => return Err(EvalError::InvalidConfig(*self)),
            (false, false, false) => Method::Baseline,
            (false, true, false) => Method::Sv,
            (true, false, false) => Method::Trsf,
            (false, true, true) => Method::CamvNoFacts,
            (true, true, false) => Method::SvTrsf,
            (true, true, true) => Method::Camv,
        })
    }

    pub fn label(&self) -> &'static str {
        match (self.trsf, self.sv, self.camv) {
            (false, false, false) => "Baseline",
            (false, true, false) => "SV",
            (true, false, false) => "TRSF",
            (false, true, true) => "CAMV",
            (true, true, false) => "SV + TRSF",
            (true, true, true) => "CAMV + TRSF",
            (_, false, true) => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodVerdict {
    pub answer: Option<CanonicalValue>,
    /// `None` when the scenario has no oracle.
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_calls: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub experts: usize,
    pub verdicts: BTreeMap<String, MethodVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub score: f64,
    pub correct: usize,
    pub scored: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_calls: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Vec<MethodSummary>,
    pub scenarios: Vec<ScenarioResult>,
    /// Distinct generator descriptions found in scenario metadata.
    pub generators: Vec<serde_json::Value>,
    pub wall_time_ms: f64,
}

impl EvalReport {
    pub fn score(&self, method: Method) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.method == method.name())
            .map(|s| s.score)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:<14} {:>8} {:>10} {:>12}",
            "row", "method", "score", "correct", "verify_calls"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<14} {:<14} {:>8.4} {:>10} {:>12}",
                s.label.as_deref().unwrap_or("-"),
                s.method,
                s.score,
                format!("{}/{}", s.correct, s.scored),
                s.verify_calls.map_or("-".to_string(), |v| v.to_string()),
            );
        }
        let _ = writeln!(out, "scenarios: {}", self.scenarios.len());
        out
    }
}

fn facts_gated(sc: &Scenario, outputs: &[ExpertOutput], threshold: f64) -> Vec<ExpertOutput> {
    let none = ConstraintSet::new();
    let kept: Vec<ExpertOutput> = outputs
        .iter()
        .filter(|o| !gate(o, &sc.dag, &none, Some(&sc.facts), threshold).rejected())
        .cloned()
        .collect();
    if kept.is_empty() {
        outputs.to_vec()
    } else {
        kept
    }
}

/// Runs one method on one scenario.
pub fn evaluate_scenario(sc: &Scenario, method: Method, base: &CamvConfig) -> MethodVerdict {
    let config = sc.config(base);
    let outputs = sc.outputs(config.traces_per_expert);
    let responses: Vec<CanonicalValue> = outputs.iter().map(|o| o.response.clone()).collect();
    let oracle = sc.oracle();
    let mut verify_calls = None;
    let mut error = None;

    let answer = match method {
        Method::Mv => majority_vote(&responses).ok(),
        Method::Sv => simple_verification(&outputs, &HighestConfidence).ok(),
        Method::Baseline => responses.first().cloned(),
        Method::Trsf => facts_gated(sc, &outputs, config.gate_threshold)
            .first()
            .map(|o| o.response.clone()),
        Method::SvTrsf => simple_verification(
            &facts_gated(sc, &outputs, config.gate_threshold),
            &HighestConfidence,
        )
        .ok(),
        Method::PassN => match oracle {
            Some(o) if pass_at_n(&responses, o) => Some(o.answer.clone()),
            _ => None,
        },
        Method::Camv | Method::CamvNoFacts => {
            let cfg = CamvConfig {
                use_facts: method == Method::Camv,
                ..config
            };
            let mut log = AuditLog::new();
            match sc.run(&cfg, &mut log) {
                Ok(out) => {
                    verify_calls = Some(out.verify_calls);
                    Some(out.answer)
                }
                Err(e) => {
                    verify_calls = Some(0);
                    error = Some(e.to_string());
                    None
                }
            }
        }
    };

    let correct = oracle.map(|o| match (method, &answer) {
        (Method::PassN, _) => pass_at_n(&responses, o),
        (_, Some(a)) => a.canonical_eq(&o.answer),
        (_, None) => false,
    });
    MethodVerdict {
        answer,
        correct,
        verify_calls,
        error,
    }
}

fn assemble(
    corpus: &[(String, Scenario)],
    methods: &[(Method, Option<&'static str>)],
    base: &CamvConfig,
) -> Result<EvalReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if methods.is_empty() {
        return Err(EvalError::NoMethods);
    }
    let start = Instant::now();
    let scenarios: Vec<ScenarioResult> = corpus
        .par_iter()
        .map(|(name, sc)| ScenarioResult {
            scenario: name.clone(),
            experts: sc.experts.len(),
            verdicts: methods
                .iter()
                .map(|(m, _)| (m.name().to_string(), evaluate_scenario(sc, *m, base)))
                .collect(),
        })
        .collect();

    let summary = methods
        .iter()
        .map(|(m, label)| {
            let verdicts: Vec<&MethodVerdict> =
                scenarios.iter().map(|s| &s.verdicts[m.name()]).collect();
            let scored = verdicts.iter().filter(|v| v.correct.is_some()).count();
            let correct = verdicts.iter().filter(|v| v.correct == Some(true)).count();
            MethodSummary {
                method: m.name().to_string(),
                label: label.map(str::to_string),
                score: if scored == 0 {
                    0.0
                } else {
                    correct as f64 / scored as f64
                },
                correct,
                scored,
                verify_calls: m
                    .runs_camv()
                    .then(|| verdicts.iter().filter_map(|v| v.verify_calls).sum()),
            }
        })
        .collect();

    let mut generators: Vec<serde_json::Value> = Vec::new();
    for (_, sc) in corpus {
        if let Some(g) = sc.file.meta.get("generator") {
            let desc = serde_json::json!({
                "generator": g,
                "params": sc.file.meta.get("params"),
                "seed": sc.file.meta.get("seed"),
            });
            if !generators.contains(&desc) {
                generators.push(desc);
            }
        }
    }

    Ok(EvalReport {
        summary,
        scenarios,
        generators,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Evaluates `methods` on every scenario. Scenarios run in parallel; the
/// report keeps corpus order.
pub fn evaluate(
    corpus: &[(String, Scenario)],
    methods: &[Method],
    base: &CamvConfig,
) -> Result<EvalReport, EvalError> {
    let methods: Vec<(Method, Option<&'static str>)> = methods.iter().map(|m| (*m, None)).collect();
    assemble(corpus, &methods, base)
}

/// Evaluates each configuration on identical scenarios and settings.
pub fn run_ablation(
    corpus: &[(String, Scenario)],
    configs: &[AblationConfig],
    base: &CamvConfig,
) -> Result<EvalReport, EvalError> {
    let methods = configs
        .iter()
        .map(|c| c.method().map(|m| (m, Some(c.label()))))
        .collect::<Result<Vec<_>, _>>()?;
    assemble(corpus, &methods, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camv_without_sv_is_rejected() {
        assert_eq!(
            AblationConfig::new(true, false, true).method(),
            Err(EvalError::InvalidConfig(AblationConfig::new(true, false, true)))
        );
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("vote".parse::<Method>().is_err());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert_eq!(
            evaluate(&[], &[Method::Mv], &CamvConfig::default()),
            Err(EvalError::EmptyCorpus)
        );
    }
}
