use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use scene4d_core::distill::DistillError;
use scene4d_core::editor::EditError;
use scene4d_core::formats::FormatError;
use scene4d_core::guidance::GuidanceError;
use scene4d_core::parser::ParseError;
use scene4d_core::raster::RasterError;
use scene4d_core::scene::SceneError;
use scene4d_core::trajectory::TrajectoryError;

/// Error payload returned by every endpoint and printed by the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub module: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("session {0:?} not found")]
    SessionNotFound(String),
    #[error("nothing to undo: the session is at its initial scene")]
    NothingToUndo,
    #[error("{0}")]
    BadRequest(String),
    #[error("no endpoint at {0}")]
    NoRoute(String),
    #[error("session data is corrupt: {0}")]
    Corrupt(String),
}

impl EngineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            EngineError::Parse(_) => "command-parser",
            EngineError::Trajectory(_) => "trajectory-planner",
            EngineError::Guidance(_) => "guidance-engine",
            EngineError::Scene(_) => "scene-core",
            EngineError::Raster(_) => "rasterizer",
            EngineError::Distill(_) => "distiller",
            EngineError::Edit(_) => "editor",
            _ => "engine-service",
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            EngineError::Parse(e) => match e {
                ParseError::Empty => "empty_command",
                ParseError::MissingSlot { .. } => "missing_slot",
                ParseError::UnknownDirection { .. } => "unknown_direction",
            },
            EngineError::Trajectory(_) => "invalid_trajectory",
            EngineError::Guidance(e) => match e {
                GuidanceError::NonFiniteGradient(_) => "non_finite_gradient",
                _ => "guidance_failed",
            },
            EngineError::Scene(_) => "invalid_scene",
            EngineError::Raster(_) => "render_failed",
            EngineError::Distill(e) => match e {
                DistillError::Diverged { .. } => "diverged",
                _ => "distillation_failed",
            },
            EngineError::Edit(e) => match e {
                EditError::EmptySelection { .. } => "empty_selection",
                EditError::UnknownColor(_) => "unknown_color",
                EditError::MissingColor => "missing_color",
                EditError::ZeroNorm => "undefined_similarity",
                _ => "edit_failed",
            },
            EngineError::Format(_) => "format",
            EngineError::Io { .. } => "io",
            EngineError::SessionNotFound(_) => "session_not_found",
            EngineError::NothingToUndo => "nothing_to_undo",
            EngineError::BadRequest(_) => "bad_request",
            EngineError::NoRoute(_) => "no_such_endpoint",
            EngineError::Corrupt(_) => "corrupt_session",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            module: self.module().to_string(),
            code: self.code().to_string(),
            message: self.to_string(),
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;
