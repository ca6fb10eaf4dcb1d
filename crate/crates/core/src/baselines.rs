//! Reference baselines: majority voting, single-pass simple verification,
//! and oracle pass@N.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::ExpertOutput;
use crate::plan_dag::StepId;
use crate::value::{group_values, CanonicalValue};

/// Ground truth for synthetic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOracle {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub truth: BTreeMap<StepId, CanonicalValue>,
    pub answer: CanonicalValue,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("baseline needs at least one response")]
pub struct EmptyInputError;

/// Modal response under canonical equality.
///
/// `responses` must be in expert-id order; ties go to the value whose first
/// supporter comes first.
pub fn majority_vote(responses: &[CanonicalValue]) -> Result<CanonicalValue, EmptyInputError> {
    let groups = group_values(responses.iter());
    let mut best: Option<&(CanonicalValue, Vec<usize>)> = None;
    for g in &groups {
        if best.is_none_or(|b| g.1.len() > b.1.len()) {
            best = Some(g);
        }
    }
    best.map(|(v, _)| v.clone()).ok_or(EmptyInputError)
}

/// Single-pass answer selection over raw expert outputs.
pub trait Synthesizer: Sync {
    /// Index into `outputs` of the chosen response.
    fn pick(&self, outputs: &[ExpertOutput]) -> Option<usize>;
}

/// Highest mean step confidence; ties to the earliest output. No pruning,
/// so a constraint-violating response can win.
#[derive(Debug, Clone, Copy, Default)]
pub struct HighestConfidence;

impl Synthesizer for HighestConfidence {
    fn pick(&self, outputs: &[ExpertOutput]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, o) in outputs.iter().enumerate() {
            let c = o.mean_confidence();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Feeds every output to `synthesizer` with no pruning, anchoring or audit.
pub fn simple_verification(
    outputs: &[ExpertOutput],
    synthesizer: &dyn Synthesizer,
) -> Result<CanonicalValue, EmptyInputError> {
    synthesizer
        .pick(outputs)
        .and_then(|i| outputs.get(i))
        .map(|o| o.response.clone())
        .ok_or(EmptyInputError)
}

/// True iff any candidate equals the oracle answer.
pub fn pass_at_n(candidates: &[CanonicalValue], oracle: &ScenarioOracle) -> bool {
    candidates.iter().any(|c| c.canonical_eq(&oracle.answer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan_dag::StepResult;

    fn nums(xs: &[f64]) -> Vec<CanonicalValue> {
        xs.iter().map(|&x| x.into()).collect()
    }

    fn out(id: &str, conf: f64, response: f64) -> ExpertOutput {
        ExpertOutput {
            expert_id: id.into(),
            intermediates: BTreeMap::from([("s1".into(), StepResult::new(1.0, conf))]),
            analysis: String::new(),
            response: response.into(),
        }
    }

    #[test]
    fn clear_mode_wins() {
        assert_eq!(majority_vote(&nums(&[42.0, 42.0, 17.0])).unwrap(), 42.0.into());
    }

    #[test]
    fn tie_goes_to_first_expert() {
        assert_eq!(majority_vote(&nums(&[42.0, 17.0])).unwrap(), 42.0.into());
        assert_eq!(majority_vote(&nums(&[17.0, 42.0])).unwrap(), 17.0.into());
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn sv_picks_most_confident() {
        assert_eq!(
            simple_verification(&[out("e001", 0.5, 1.0)], &HighestConfidence).unwrap(),
            1.0.into()
        );
        let outputs = [out("e001", 0.9, 1.0), out("e002", 0.4, 2.0)];
        assert_eq!(simple_verification(&outputs, &HighestConfidence).unwrap(), 1.0.into());
        let outputs = [out("e001", 0.4, 1.0), out("e002", 0.9, 2.0)];
        assert_eq!(simple_verification(&outputs, &HighestConfidence).unwrap(), 2.0.into());
    }

    #[test]
    fn pass_at_n_membership() {
        let oracle = ScenarioOracle {
            truth: BTreeMap::new(),
            answer: 42.0.into(),
        };
        assert!(pass_at_n(&nums(&[17.0, 42.0]), &oracle));
        assert!(!pass_at_n(&nums(&[17.0, 18.0]), &oracle));
    }
}
