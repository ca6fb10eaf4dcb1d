//! Multi-expert reasoning with conflict-aware meta-verification.
//!
//! Several experts answer a query by walking a shared plan DAG. Their traces
//! are gated against hard constraints, agreed steps become anchors, contested
//! steps are audited under a verification budget, and a scored synthesis picks
//! the final answer. A three-tier facts store (tool records, notes, facts)
//! supplies the verified context that gating and auditing draw on.

pub mod audit_log;
pub mod baselines;
pub mod camv;
pub mod corpus;
pub mod ensemble;
pub mod eval;
pub mod facts;
pub mod live;
pub mod plan_dag;
pub mod replay;
pub mod scenario;
pub mod tools;
pub mod value;
pub mod verifier;

pub use audit_log::{AuditLog, AuditLogEntry, Stage};
pub use camv::{run_camv, CamvConfig, CamvError, CamvInput, CamvOutput};
pub use plan_dag::{build_plan, PlanDag, StepId, StepResult};
pub use value::CanonicalValue;
