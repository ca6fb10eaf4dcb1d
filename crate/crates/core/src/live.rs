//! Chat-completion style HTTP backend.
//!
//! The wire format is the common `{"model", "messages"} -> {"choices": [{"message":
//! {"content"}}]}` shape. Each choice's content must itself be a JSON object
//! `{"intermediates": {step: {"value", "confidence"}}, "analysis", "response"}`;
//! anything else is a [`SchemaError`]. Reply parsing is always compiled so it
//! can be tested offline; the HTTP client needs the `live` feature.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::Value;

use crate::ensemble::{ExpertConfig, ExpertOutput, SchemaError};
use crate::plan_dag::{StepId, StepResult};
use crate::value::CanonicalValue;

pub const ENDPOINT_VAR: &str = "METAVERIFY_ENDPOINT";
pub const TOKEN_VAR: &str = "METAVERIFY_TOKEN";
pub const MODEL_VAR: &str = "METAVERIFY_MODEL";

/// Default system prompt; `{class}` is replaced with the expert's class.
pub const DEFAULT_TEMPLATE: &str = "You are a {class} expert. Answer as a JSON object with \
`intermediates` (step id -> {value, confidence in [0,1]}), `analysis` and `response`.";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    intermediates: BTreeMap<StepId, StepResult>,
    #[serde(default)]
    analysis: String,
    response: CanonicalValue,
}

/// Builds the request body for one expert.
pub fn request_body(model: &str, template: &str, config: &ExpertConfig, query: &str) -> Value {
    let class = serde_json::to_value(config.class)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    serde_json::json!({
        "model": model,
        "temperature": config.temperature,
        "seed": config.seed,
        "messages": [
            {"role": "system", "content": template.replace("{class}", &class)},
            {"role": "user", "content": query},
        ],
    })
}

/// Maps a completion response into validated outputs, one per choice.
pub fn parse_completion(config: &ExpertConfig, body: &Value) -> Result<Vec<ExpertOutput>, SchemaError> {
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| SchemaError::Malformed("missing `choices` array".into()))?;
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let content = c
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| SchemaError::Malformed(format!("choice {i}: missing message content")))?;
            let reply: Reply = serde_json::from_str(content.trim())
                .map_err(|e| SchemaError::Malformed(format!("choice {i}: {e}")))?;
            let out = ExpertOutput {
                expert_id: config.expert_id.clone(),
                intermediates: reply.intermediates,
                analysis: reply.analysis,
                response: reply.response,
            };
            out.validate()?;
            Ok(out)
        })
        .collect()
}

#[cfg(feature = "live")]
pub use client::LiveBackend;

#[cfg(feature = "live")]
mod client {
    use super::*;
    use crate::ensemble::{BackendError, ExpertBackend};

    /// Posts one request per expert to a chat-completion endpoint.
    #[derive(Debug, Clone)]
    pub struct LiveBackend {
        endpoint: String,
        token: Option<String>,
        model: String,
        template: String,
        client: reqwest::blocking::Client,
    }

    impl LiveBackend {
        pub fn new(endpoint: impl Into<String>, token: Option<String>, model: impl Into<String>) -> Self {
            LiveBackend {
                endpoint: endpoint.into(),
                token,
                model: model.into(),
                template: DEFAULT_TEMPLATE.to_string(),
                client: reqwest::blocking::Client::new(),
            }
        }

        /// Reads the endpoint, token and model from the environment.
        pub fn from_env() -> Result<Self, BackendError> {
            let endpoint = std::env::var(ENDPOINT_VAR)
                .map_err(|_| BackendError::Transport(format!("{ENDPOINT_VAR} not set")))?;
            let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".into());
            Ok(Self::new(endpoint, std::env::var(TOKEN_VAR).ok(), model))
        }

        pub fn with_template(mut self, template: impl Into<String>) -> Self {
            self.template = template.into();
            self
        }
    }

    impl ExpertBackend for LiveBackend {
        fn sample_traces(&self, config: &ExpertConfig, query: &str) -> Result<Vec<ExpertOutput>, BackendError> {
            let mut req = self
                .client
                .post(&self.endpoint)
                .json(&request_body(&self.model, &self.template, config, query));
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            let resp = req
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let body: Value = resp
                .json()
                .map_err(|e| BackendError::Schema(SchemaError::Malformed(e.to_string())))?;
            Ok(parse_completion(config, &body)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{ExpertClass, ExpertId};

    fn config() -> ExpertConfig {
        ExpertConfig {
            expert_id: ExpertId::new("e001"),
            class: ExpertClass::Radical,
            temperature: 0.9,
            seed: 3,
        }
    }

    fn completion(content: &str) -> Value {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
    }

    #[test]
    fn parses_well_formed_reply() {
        let body = completion(r#"{"intermediates": {"s1": {"value": 4, "confidence": 0.8}}, "response": "four"}"#);
        let outs = parse_completion(&config(), &body).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].expert_id, ExpertId::new("e001"));
        assert_eq!(outs[0].response, CanonicalValue::text("four"));
    }

    #[test]
    fn out_of_range_confidence_is_schema_error() {
        let body = completion(r#"{"intermediates": {"s1": {"value": 4, "confidence": 1.5}}, "response": 4}"#);
        assert!(matches!(
            parse_completion(&config(), &body),
            Err(SchemaError::Confidence { .. })
        ));
    }

    #[test]
    fn malformed_replies_are_rejected() {
        for body in [
            serde_json::json!({}),
            completion("not json"),
            completion(r#"{"response": 4}"#),
            completion(r#"{"intermediates": {}, "response": 4, "extra": 1}"#),
        ] {
            assert!(matches!(parse_completion(&config(), &body), Err(SchemaError::Malformed(_))), "{body}");
        }
    }

    #[test]
    fn request_carries_class_and_sampling() {
        let body = request_body("m", DEFAULT_TEMPLATE, &config(), "q?");
        assert_eq!(body["temperature"], 0.9);
        assert_eq!(body["messages"][1]["content"], "q?");
        assert!(body["messages"][0]["content"].as_str().unwrap().contains("radical expert"));
    }
}
