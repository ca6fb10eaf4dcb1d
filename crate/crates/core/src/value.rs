//! Canonical values asserted by experts, tools and facts.
//!
//! All comparisons in the engine go through [`CanonicalValue::canonical_eq`]:
//! text is trimmed and case-folded, numbers compare with a combined
//! absolute/relative tolerance, quantities compare only under identical units.
//! Structural `PartialEq` is kept for serialization round-trips.

use std::fmt;

use serde::{Deserialize, Serialize};

pub const ABS_TOL: f64 = 1e-9;
pub const REL_TOL: f64 = 1e-9;

/// A number tagged with a unit, e.g. `{"value": 3.2, "unit": "m"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

/// JSON shape is untagged: `true`, `42`, `"text"`, `[..]`, `{"value":..,"unit":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CanonicalValue {
    Boolean(bool),
    Number(f64),
    Text(String),
    Composite(Vec<CanonicalValue>),
    Quantity(Quantity),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Boolean,
    Number,
    Text,
    Composite,
    Quantity,
}

pub fn numbers_equal(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let diff = (a - b).abs();
    diff <= ABS_TOL.max(REL_TOL * a.abs().max(b.abs()))
}

fn fold_text(s: &str) -> String {
    s.trim().to_lowercase()
}

impl CanonicalValue {
    pub fn number(v: f64) -> Self {
        CanonicalValue::Number(v)
    }

    pub fn text(s: impl Into<String>) -> Self {
        CanonicalValue::Text(s.into())
    }

    pub fn quantity(value: f64, unit: impl Into<String>) -> Self {
        CanonicalValue::Quantity(Quantity {
            value,
            unit: unit.into(),
        })
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            CanonicalValue::Boolean(_) => ValueKind::Boolean,
            CanonicalValue::Number(_) => ValueKind::Number,
            CanonicalValue::Text(_) => ValueKind::Text,
            CanonicalValue::Composite(_) => ValueKind::Composite,
            CanonicalValue::Quantity(_) => ValueKind::Quantity,
        }
    }

    /// Equality under canonicalization. Values of different kinds never match.
    pub fn canonical_eq(&self, other: &CanonicalValue) -> bool {
        use CanonicalValue::*;
        match (self, other) {
            (Boolean(a), Boolean(b)) => a == b,
            (Number(a), Number(b)) => numbers_equal(*a, *b),
            (Text(a), Text(b)) => fold_text(a) == fold_text(b),
            (Quantity(a), Quantity(b)) => {
                fold_text(&a.unit) == fold_text(&b.unit) && numbers_equal(a.value, b.value)
            }
            (Composite(a), Composite(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.canonical_eq(y))
            }
            _ => false,
        }
    }

    /// The unit tag, for quantities.
    pub fn unit(&self) -> Option<&str> {
        match self {
            CanonicalValue::Quantity(q) => Some(q.unit.as_str()),
            _ => None,
        }
    }

    /// Numeric payload of numbers and quantities.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CanonicalValue::Number(v) => Some(*v),
            CanonicalValue::Quantity(q) => Some(q.value),
            _ => None,
        }
    }

    /// True when every number in the value is finite.
    pub fn is_finite(&self) -> bool {
        match self {
            CanonicalValue::Number(v) => v.is_finite(),
            CanonicalValue::Quantity(q) => q.value.is_finite(),
            CanonicalValue::Composite(items) => items.iter().all(CanonicalValue::is_finite),
            _ => true,
        }
    }

    /// Compact JSON form, used for log payloads and table keys.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("canonical values always serialize")
    }
}

impl fmt::Display for CanonicalValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanonicalValue::Boolean(b) => write!(f, "{b}"),
            CanonicalValue::Number(v) => write!(f, "{v}"),
            CanonicalValue::Text(s) => f.write_str(s),
            CanonicalValue::Quantity(q) => write!(f, "{} {}", q.value, q.unit),
            CanonicalValue::Composite(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

impl From<f64> for CanonicalValue {
    fn from(v: f64) -> Self {
        CanonicalValue::Number(v)
    }
}

impl From<i64> for CanonicalValue {
    fn from(v: i64) -> Self {
        CanonicalValue::Number(v as f64)
    }
}

impl From<&str> for CanonicalValue {
    fn from(s: &str) -> Self {
        CanonicalValue::Text(s.to_string())
    }
}

impl From<bool> for CanonicalValue {
    fn from(b: bool) -> Self {
        CanonicalValue::Boolean(b)
    }
}

/// Groups values into canonical-equality classes, first-fit.
///
/// Returns `(representative, member indices)` in order of first appearance.
pub fn group_values<'a, I>(values: I) -> Vec<(CanonicalValue, Vec<usize>)>
where
    I: IntoIterator<Item = &'a CanonicalValue>,
{
    let mut groups: Vec<(CanonicalValue, Vec<usize>)> = Vec::new();
    for (idx, v) in values.into_iter().enumerate() {
        match groups.iter_mut().find(|(rep, _)| rep.canonical_eq(v)) {
            Some((_, members)) => members.push(idx),
            None => groups.push((v.clone(), vec![idx])),
        }
    }
    groups
}
