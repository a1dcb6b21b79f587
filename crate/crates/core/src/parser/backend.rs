//! Optional remote plan producers.
//!
//! A backend receives the command together with the plan JSON Schema and must
//! answer with a plan document. Anything it returns is validated; invalid
//! answers and transport failures fall back to the grammar.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{parse, plan_schema, ExecutionPlan, ParseError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub command: String,
    pub schema: serde_json::Value,
}

impl PlanRequest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            schema: plan_schema(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("backend answered with HTTP status {0}")]
    Status(u16),
    #[error("backend response is not JSON: {0}")]
    Body(String),
}

/// Anything that can turn a command into a plan document.
pub trait PlanBackend {
    fn request_plan(&self, request: &PlanRequest) -> Result<serde_json::Value, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Grammar,
    Backend,
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPlan {
    pub plan: ExecutionPlan,
    pub provenance: Provenance,
}

/// Asks `backend` for a plan and falls back to [`parse`] when the backend
/// fails or returns something that does not validate.
pub fn parse_with_backend(
    command: &str,
    backend: &dyn PlanBackend,
) -> Result<ParsedPlan, ParseError> {
    if command.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let reason = match backend.request_plan(&PlanRequest::new(command)) {
        Ok(value) => match ExecutionPlan::from_json_value(value) {
            Ok(plan) => {
                return Ok(ParsedPlan {
                    plan,
                    provenance: Provenance::Backend,
                })
            }
            Err(e) => {
                log::warn!("plan backend returned an invalid plan for {command:?}: {e}");
                e.to_string()
            }
        },
        Err(e) => {
            log::warn!("plan backend failed for {command:?}: {e}");
            e.to_string()
        }
    };
    Ok(ParsedPlan {
        plan: parse(command)?,
        provenance: Provenance::Fallback { reason },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{EditQuery, EditVerb};

    struct Canned(Result<serde_json::Value, BackendError>);

    impl PlanBackend for Canned {
        fn request_plan(&self, request: &PlanRequest) -> Result<serde_json::Value, BackendError> {
            assert!(request.schema.get("oneOf").is_some());
            self.0.clone()
        }
    }

    #[test]
    fn valid_backend_plan_matches_grammar_shape() {
        let backend = Canned(Ok(serde_json::json!({
            "module": "EDIT",
            "queries": {"verb": "remove", "target_phrase": "ball"}
        })));
        let out = parse_with_backend("Delete the ball", &backend).unwrap();
        assert_eq!(out.provenance, Provenance::Backend);
        assert_eq!(out.plan, parse("Delete the ball").unwrap());
    }

    #[test]
    fn unreachable_backend_falls_back() {
        let backend = Canned(Err(BackendError::Unreachable("connection refused".into())));
        let out = parse_with_backend("Delete the ball", &backend).unwrap();
        assert!(matches!(out.provenance, Provenance::Fallback { .. }));
        assert_eq!(
            out.plan,
            ExecutionPlan::Edit(EditQuery {
                verb: EditVerb::Remove,
                target_phrase: "ball".into(),
                new_color: None
            })
        );
    }

    #[test]
    fn every_invalid_module_name_falls_back() {
        for module in ["PAINT", "gen", "edit", "", "GENERATE"] {
            let backend = Canned(Ok(serde_json::json!({
                "module": module,
                "queries": {"verb": "remove", "target_phrase": "ball"}
            })));
            let out = parse_with_backend("Delete the ball", &backend).unwrap();
            match out.provenance {
                Provenance::Fallback { reason } => assert!(reason.contains("schema"), "{reason}"),
                other => panic!("{module}: expected fallback, got {other:?}"),
            }
        }
    }

    #[test]
    fn grammar_errors_still_surface() {
        let backend = Canned(Err(BackendError::Timeout));
        assert!(parse_with_backend("Delete", &backend).is_err());
    }
}
